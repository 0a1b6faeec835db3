"""Approximate static call graph over chunks, and call-graph context text.

Edges come from name-based resolution with import awareness: a call
resolves to a definition in the same file when one exists, else through
explicit import statements visible in chunk texts, else it is dropped and
tallied. Method calls resolve only when the receiver's class is
syntactically evident (self/cls, a constructor assignment, or an
annotation). Ambiguous resolutions keep every candidate.

Context assembly concatenates a base chunk with downstream neighbors,
separated by the literal `[DOWN]` token, under a character budget.
"""

from __future__ import annotations

import ast
import json
import os
import textwrap
from dataclasses import dataclass, field

from .chunking import (
    KIND_CLASS,
    KIND_FUNCTION,
    KIND_METHOD,
    Chunk,
    ChunkSet,
    render_chunk,
)
from .embedding import DOWN_TOKEN

DEFAULT_CONTEXT_BUDGET = 4096

DIRECTIONS = ("downstream", "upstream", "both")


@dataclass
class GraphDiagnostics:
    resolved_calls: int = 0
    unresolved_calls: int = 0
    unparsed_chunks: int = 0


@dataclass
class CallGraph:
    """Directed chunk-call relation. `edges` keeps insertion order (caller
    position, then call-site order), which fixes downstream neighbor order
    and survives the JSONL round trip."""

    node_ids: set[str]
    edges: list[tuple[str, str]]
    diagnostics: GraphDiagnostics = field(default_factory=GraphDiagnostics)

    def __post_init__(self):
        self._edge_set = set(self.edges)
        for caller, callee in self.edges:
            if caller == callee:
                raise ValueError(f"self-loop on {caller}")
            if caller not in self.node_ids or callee not in self.node_ids:
                raise ValueError(f"edge endpoint not a node: ({caller}, {callee})")
        if len(self._edge_set) != len(self.edges):
            raise ValueError("duplicate edges")

    def has_edge(self, caller: str, callee: str) -> bool:
        return (caller, callee) in self._edge_set

    def edge_set(self) -> set[tuple[str, str]]:
        return set(self._edge_set)


@dataclass
class ContextualizedChunk:
    base_chunk_id: str
    context_text: str
    segment_spans: list[tuple[int, int, str]]
    included_neighbor_ids: list[str]


# --- symbol tables ----------------------------------------------------------


@dataclass
class _ClassInfo:
    chunk_id: str
    methods: dict[str, str] = field(default_factory=dict)

    def constructor_target(self) -> str:
        """Chunk a constructor call lands on: __init__ when present,
        else the class representation itself."""
        return self.methods.get("__init__", self.chunk_id)


@dataclass
class _FileTables:
    functions: dict[str, str] = field(default_factory=dict)
    classes: dict[str, _ClassInfo] = field(default_factory=dict)
    module_aliases: dict[str, str] = field(default_factory=dict)
    symbol_aliases: dict[str, tuple[str, str]] = field(default_factory=dict)
    star_imports: list[str] = field(default_factory=list)


def _module_name(file_path: str) -> str:
    parts = file_path[:-3].split("/") if file_path.endswith(".py") else file_path.split("/")
    if parts and parts[-1] == "__init__":
        parts = parts[:-1]
    return ".".join(parts)


def _parse_chunk_body(chunk: Chunk) -> ast.AST | None:
    try:
        return ast.parse(textwrap.dedent(chunk.body_text))
    except SyntaxError:
        return None


def _resolve_relative(file_path: str, module: str | None, level: int) -> str | None:
    """Absolute module name for `from <dots><module> import ...`."""
    if level == 0:
        return module
    dir_parts = file_path.split("/")[:-1]
    if len(dir_parts) < level - 1:
        return None
    base = dir_parts[: len(dir_parts) - (level - 1)] if level > 1 else dir_parts
    parts = base + (module.split(".") if module else [])
    return ".".join(parts) if parts else None


class _Resolver:
    def __init__(self, chunks: ChunkSet):
        self.chunks = chunks
        self.tables: dict[str, _FileTables] = {}
        self.module_to_file: dict[str, str] = {}
        self.parsed: dict[str, ast.AST | None] = {}

        for chunk in chunks.chunks:
            table = self.tables.setdefault(chunk.file_path, _FileTables())
            mod = _module_name(chunk.file_path)
            if mod:
                self.module_to_file.setdefault(mod, chunk.file_path)
            if chunk.kind == KIND_FUNCTION:
                table.functions.setdefault(chunk.qualified_name, chunk.chunk_id)
            elif chunk.kind == KIND_CLASS:
                table.classes.setdefault(
                    chunk.qualified_name, _ClassInfo(chunk_id=chunk.chunk_id)
                )
        # Second pass: attach methods to their classes.
        for chunk in chunks.chunks:
            if chunk.kind != KIND_METHOD or "." not in chunk.qualified_name:
                continue
            class_name, method_name = chunk.qualified_name.rsplit(".", 1)
            info = self.tables[chunk.file_path].classes.get(class_name)
            if info is not None:
                info.methods.setdefault(method_name, chunk.chunk_id)
        # Third pass: imports — from the per-file tables captured at chunk
        # time when available, plus whatever is visible inside chunk bodies
        # (module remainders, function-local imports).
        for file_path, texts in chunks.file_imports.items():
            if file_path not in self.tables:
                continue
            for text in texts:
                try:
                    tree = ast.parse(textwrap.dedent(text))
                except SyntaxError:
                    continue
                for node in ast.walk(tree):
                    self._ingest_import(file_path, node)
        for chunk in chunks.chunks:
            if chunk.kind == KIND_CLASS:
                continue
            tree = _parse_chunk_body(chunk)
            self.parsed[chunk.chunk_id] = tree
            if tree is None:
                continue
            for node in ast.walk(tree):
                self._ingest_import(chunk.file_path, node)

    def _ingest_import(self, file_path: str, node: ast.AST) -> None:
        table = self.tables[file_path]
        if isinstance(node, ast.Import):
            for alias in node.names:
                local = alias.asname or alias.name.split(".")[0]
                target = alias.name if alias.asname else alias.name.split(".")[0]
                table.module_aliases.setdefault(local, target)
        elif isinstance(node, ast.ImportFrom):
            base = _resolve_relative(file_path, node.module, node.level)
            if base is None:
                return
            for alias in node.names:
                if alias.name == "*":
                    if base not in table.star_imports:
                        table.star_imports.append(base)
                    continue
                local = alias.asname or alias.name
                dotted = f"{base}.{alias.name}"
                if dotted in self.module_to_file:
                    table.module_aliases.setdefault(local, dotted)
                else:
                    table.symbol_aliases.setdefault(local, (base, alias.name))

    # -- lookups --------------------------------------------------------

    def _module_tables(self, module: str) -> _FileTables | None:
        file_path = self.module_to_file.get(module)
        return self.tables.get(file_path) if file_path else None

    def lookup_function(self, file_path: str, name: str) -> list[str]:
        """Chunk ids a bare-name call `name(...)` in `file_path` can reach."""
        table = self.tables[file_path]
        if name in table.functions:
            return [table.functions[name]]
        if name in table.classes:
            return [table.classes[name].constructor_target()]
        if name in table.symbol_aliases:
            module, symbol = table.symbol_aliases[name]
            remote = self._module_tables(module)
            if remote is not None:
                if symbol in remote.functions:
                    return [remote.functions[symbol]]
                if symbol in remote.classes:
                    return [remote.classes[symbol].constructor_target()]
            return []
        hits = []
        for module in table.star_imports:
            remote = self._module_tables(module)
            if remote is None:
                continue
            if name in remote.functions:
                hits.append(remote.functions[name])
            elif name in remote.classes:
                hits.append(remote.classes[name].constructor_target())
        return hits

    def lookup_class(self, file_path: str, name: str) -> _ClassInfo | None:
        """Class info for a (possibly imported) class name used in
        `file_path`; None when not syntactically evident."""
        table = self.tables[file_path]
        if name in table.classes:
            return table.classes[name]
        if name in table.symbol_aliases:
            module, symbol = table.symbol_aliases[name]
            remote = self._module_tables(module)
            if remote is not None:
                return remote.classes.get(symbol)
            return None
        for module in table.star_imports:
            remote = self._module_tables(module)
            if remote is not None and name in remote.classes:
                return remote.classes[name]
        return None

    def resolve_dotted(self, file_path: str, parts: list[str]) -> list[str]:
        """Resolution of an attribute-chain call `a.b.c(...)`."""
        table = self.tables[file_path]
        head = parts[0]
        # Class method through the class name itself: A.m() or pkg-local
        # dotted class names (Outer.Inner).
        for split in range(len(parts) - 1, 0, -1):
            class_key = ".".join(parts[:split])
            info = table.classes.get(class_key)
            if info is not None and split == len(parts) - 1:
                method = info.methods.get(parts[-1])
                if method:
                    return [method]
                if parts[-1] == "__init__":
                    return [info.constructor_target()]
        if head in table.classes:
            return []
        # Module alias chains: mod.f(), mod.A(), pkg.mod.f().
        if head in table.module_aliases:
            full = [*table.module_aliases[head].split("."), *parts[1:]]
            for split in range(len(full) - 1, 0, -1):
                module = ".".join(full[:split])
                remote = self._module_tables(module)
                if remote is None:
                    continue
                rest = full[split:]
                if len(rest) == 1:
                    if rest[0] in remote.functions:
                        return [remote.functions[rest[0]]]
                    if rest[0] in remote.classes:
                        return [remote.classes[rest[0]].constructor_target()]
                elif len(rest) == 2 and rest[0] in remote.classes:
                    method = remote.classes[rest[0]].methods.get(rest[1])
                    if method:
                        return [method]
                return []
        # Imported class used as receiver: from m import A; A.m().
        if head in table.symbol_aliases and len(parts) == 2:
            info = self.lookup_class(file_path, head)
            if info is not None:
                method = info.methods.get(parts[1])
                if method:
                    return [method]
        return []


def _attribute_parts(node: ast.expr) -> list[str] | None:
    parts: list[str] = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return list(reversed(parts))
    return None


def _annotation_name(node: ast.expr | None) -> str | None:
    if node is None:
        return None
    if isinstance(node, ast.Constant) and isinstance(node.value, str):
        return node.value
    if isinstance(node, ast.Name):
        return node.id
    parts = _attribute_parts(node)
    return ".".join(parts) if parts else None


def _local_types(tree: ast.AST, resolver: _Resolver, file_path: str) -> dict[str, _ClassInfo]:
    """Receiver types evident inside one chunk: constructor assignments and
    annotations (variables and function parameters)."""
    types: dict[str, _ClassInfo] = {}
    for node in ast.walk(tree):
        if isinstance(node, ast.Assign) and isinstance(node.value, ast.Call):
            name = _call_target_name(node.value)
            if name is None:
                continue
            info = resolver.lookup_class(file_path, name)
            if info is not None:
                for target in node.targets:
                    if isinstance(target, ast.Name):
                        types[target.id] = info
        elif isinstance(node, ast.AnnAssign) and isinstance(node.target, ast.Name):
            name = _annotation_name(node.annotation)
            if name:
                info = resolver.lookup_class(file_path, name)
                if info is not None:
                    types[node.target.id] = info
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            args = [*node.args.posonlyargs, *node.args.args, *node.args.kwonlyargs]
            for arg in args:
                name = _annotation_name(arg.annotation)
                if name:
                    info = resolver.lookup_class(file_path, name)
                    if info is not None:
                        types[arg.arg] = info
    return types


def _call_target_name(call: ast.Call) -> str | None:
    if isinstance(call.func, ast.Name):
        return call.func.id
    parts = _attribute_parts(call.func)
    return ".".join(parts) if parts else None


def _enclosing_class(chunk: Chunk) -> str | None:
    if chunk.kind == KIND_METHOD and "." in chunk.qualified_name:
        return chunk.qualified_name.rsplit(".", 1)[0]
    return None


def build_call_graph(chunks: ChunkSet) -> CallGraph:
    """Directed edges (caller, callee) over the chunk set; deterministic;
    unresolvable calls are dropped and tallied in diagnostics."""
    resolver = _Resolver(chunks)
    diagnostics = GraphDiagnostics()
    node_ids = set(chunks.ids())
    edges: list[tuple[str, str]] = []
    edge_seen: set[tuple[str, str]] = set()

    for chunk in chunks.chunks:
        if chunk.kind == KIND_CLASS:
            continue
        tree = resolver.parsed.get(chunk.chunk_id)
        if tree is None:
            diagnostics.unparsed_chunks += 1
            continue
        local_types = _local_types(tree, resolver, chunk.file_path)
        enclosing = _enclosing_class(chunk)
        calls = sorted(
            (n for n in ast.walk(tree) if isinstance(n, ast.Call)),
            key=lambda n: (n.lineno, n.col_offset),
        )
        for call in calls:
            targets: list[str] = []
            if isinstance(call.func, ast.Name):
                targets = resolver.lookup_function(chunk.file_path, call.func.id)
            else:
                parts = _attribute_parts(call.func)
                if parts is not None:
                    head = parts[0]
                    if head in ("self", "cls") and enclosing and len(parts) == 2:
                        info = resolver.tables[chunk.file_path].classes.get(enclosing)
                        if info is not None:
                            method = info.methods.get(parts[1])
                            if method:
                                targets = [method]
                    elif head in local_types and len(parts) == 2:
                        method = local_types[head].methods.get(parts[1])
                        if method:
                            targets = [method]
                    else:
                        targets = resolver.resolve_dotted(chunk.file_path, parts)
            targets = [t for t in targets if t != chunk.chunk_id]
            if targets:
                diagnostics.resolved_calls += 1
                for target in targets:
                    edge = (chunk.chunk_id, target)
                    if edge not in edge_seen:
                        edge_seen.add(edge)
                        edges.append(edge)
            else:
                diagnostics.unresolved_calls += 1

    return CallGraph(node_ids=node_ids, edges=edges, diagnostics=diagnostics)


def neighbors(graph: CallGraph, chunk_id: str, direction: str = "downstream") -> list[str]:
    """Neighbor chunk ids. Downstream (callees) keep call-site order;
    upstream (callers) are sorted by chunk_id; `both` lists downstream
    first, then new upstream ids."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if chunk_id not in graph.node_ids:
        raise KeyError(f"unknown chunk_id: {chunk_id}")
    down = [callee for caller, callee in graph.edges if caller == chunk_id]
    if direction == "downstream":
        return down
    up = sorted({caller for caller, callee in graph.edges if callee == chunk_id})
    if direction == "upstream":
        return up
    return down + [u for u in up if u not in down]


def assemble_context(
    chunk: Chunk,
    graph: CallGraph,
    chunks: ChunkSet,
    budget: int = DEFAULT_CONTEXT_BUDGET,
    direction: str = "downstream",
) -> ContextualizedChunk:
    """Base text plus `[DOWN]`-separated neighbors, greedy under `budget`
    characters; stops at the first neighbor that would overflow."""
    if chunk.chunk_id not in chunks:
        raise KeyError(f"chunk not in set: {chunk.chunk_id}")
    base = chunk.rendered_text
    if budget < len(base):
        raise ValueError(
            f"budget too small: {budget} < base text length {len(base)}"
        )
    text = base
    spans: list[tuple[int, int, str]] = [(0, len(base), "base")]
    included: list[str] = []
    for neighbor_id in neighbors(graph, chunk.chunk_id, direction):
        neighbor_text = render_chunk(chunks.get(neighbor_id), include_path=False)
        if len(text) + len(DOWN_TOKEN) + len(neighbor_text) > budget:
            break
        start = len(text) + len(DOWN_TOKEN)
        text = text + DOWN_TOKEN + neighbor_text
        spans.append((start, len(text), "neighbor"))
        included.append(neighbor_id)
    return ContextualizedChunk(
        base_chunk_id=chunk.chunk_id,
        context_text=text,
        segment_spans=spans,
        included_neighbor_ids=included,
    )


def build_contexts(
    chunks: ChunkSet,
    graph: CallGraph,
    budget: int = DEFAULT_CONTEXT_BUDGET,
    direction: str = "downstream",
) -> dict[str, ContextualizedChunk]:
    """Contexts for every chunk. Unlike assemble_context, a base text longer
    than the budget is kept whole (with zero neighbors) instead of erroring,
    so pipeline runs never lose chunks."""
    out = {}
    for chunk in chunks.chunks:
        effective = max(budget, len(chunk.rendered_text))
        out[chunk.chunk_id] = assemble_context(chunk, graph, chunks, effective, direction)
    return out


# --- persistence ------------------------------------------------------------


def save_graph(graph: CallGraph, path: str | os.PathLike) -> None:
    """One {caller, callee} JSON record per edge, preserving edge order."""
    with open(path, "w", encoding="utf-8") as f:
        for caller, callee in graph.edges:
            f.write(json.dumps({"caller": caller, "callee": callee}) + "\n")


def load_graph(path: str | os.PathLike, chunks: ChunkSet) -> CallGraph:
    edges: list[tuple[str, str]] = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                edge = (record["caller"], record["callee"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad edge record") from exc
            if edge[0] not in chunks or edge[1] not in chunks:
                raise ValueError(f"{path}:{lineno}: edge endpoint not in chunk set")
            if edge not in seen:
                seen.add(edge)
                edges.append(edge)
    return CallGraph(node_ids=set(chunks.ids()), edges=edges)


def save_contexts(
    contexts: dict[str, ContextualizedChunk], path: str | os.PathLike
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for chunk_id in contexts:
            ctx = contexts[chunk_id]
            record = {
                "base_chunk_id": ctx.base_chunk_id,
                "context_text": ctx.context_text,
                "segment_spans": [[s, e, kind] for s, e, kind in ctx.segment_spans],
                "included_neighbor_ids": ctx.included_neighbor_ids,
            }
            f.write(json.dumps(record) + "\n")


def load_contexts(path: str | os.PathLike) -> dict[str, ContextualizedChunk]:
    out: dict[str, ContextualizedChunk] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ctx = ContextualizedChunk(
                    base_chunk_id=record["base_chunk_id"],
                    context_text=record["context_text"],
                    segment_spans=[tuple(span) for span in record["segment_spans"]],
                    included_neighbor_ids=list(record["included_neighbor_ids"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad context record") from exc
            out[ctx.base_chunk_id] = ctx
    return out
