"""Split Python source trees into retrieval chunks.

A chunk is one of: a top-level function, a class method, a class
representation (declaration + docstring + constructor + method signature
lines), or a module remainder (top-level statements outside any
definition). Rendered text carries the file path on its first line so the
embedder sees location; methods additionally carry their class
declaration line.
"""

from __future__ import annotations

import ast
import fnmatch
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

KIND_FUNCTION = "function"
KIND_METHOD = "method"
KIND_CLASS = "class_representation"
KIND_REMAINDER = "module_remainder"

CHUNK_KINDS = (KIND_FUNCTION, KIND_METHOD, KIND_CLASS, KIND_REMAINDER)

# Directory names excluded by default: test trees, vendored code, build
# output, environments. Matched against individual path segments.
DEFAULT_EXCLUDE_GLOBS = (
    "tests",
    "test",
    "testing",
    ".git",
    "__pycache__",
    "node_modules",
    ".venv",
    "venv",
    "build",
    "dist",
    "vendor",
    "vendored",
    "third_party",
    ".tox",
    "*.egg-info",
    "site-packages",
)

MAX_FILE_BYTES = 1024 * 1024

_STORE_FIELDS = (
    "chunk_id",
    "kind",
    "qualified_name",
    "file_path",
    "line_start",
    "line_end",
    "body_text",
    "rendered_text",
)


class ParseFailure(ValueError):
    """A source file the grammar cannot parse; carries the first error spot."""

    def __init__(self, file_path: str, line: int, message: str):
        super().__init__(f"{file_path}:{line}: {message}")
        self.file_path = file_path
        self.line = line


@dataclass
class ChunkerConfig:
    extensions: tuple[str, ...] = (".py",)
    include_globs: tuple[str, ...] | None = None
    exclude_globs: tuple[str, ...] = DEFAULT_EXCLUDE_GLOBS
    max_file_bytes: int = MAX_FILE_BYTES
    min_remainder_lines: int = 3
    include_path: bool = True


@dataclass
class SourceFile:
    repo_relative_path: str
    content: str
    line_count: int

    @classmethod
    def from_text(cls, repo_relative_path: str, content: str) -> "SourceFile":
        path = repo_relative_path.replace(os.sep, "/")
        if ".." in path.split("/"):
            raise ValueError(f"path not normalized: {repo_relative_path}")
        return cls(path, content, len(content.splitlines()))


@dataclass
class Chunk:
    chunk_id: str
    kind: str
    qualified_name: str
    file_path: str
    line_start: int
    line_end: int
    body_text: str
    rendered_text: str

    @property
    def line_span(self) -> tuple[int, int]:
        return (self.line_start, self.line_end)


@dataclass
class ChunkSet:
    repo_id: str
    chunks: list[Chunk]
    skipped_files: list[tuple[str, str]] = field(default_factory=list)
    # file_path -> import statement texts for that file. Import lines are
    # usually outside every chunk span, but call resolution needs them, so
    # the chunker captures them here and the store keeps them in a sidecar.
    file_imports: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {c.chunk_id: c for c in self.chunks}
        if len(self._by_id) != len(self.chunks):
            raise ValueError("duplicate chunk_ids in ChunkSet")

    def get(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._by_id

    def __len__(self) -> int:
        return len(self.chunks)

    def ids(self) -> list[str]:
        return [c.chunk_id for c in self.chunks]


# --- rendering --------------------------------------------------------------


def _decl_start(node) -> int:
    decorators = getattr(node, "decorator_list", [])
    if decorators:
        return min(d.lineno for d in decorators)
    return node.lineno


def _header_text(node, lines: list[str]) -> str:
    """Source of a def/class header (no decorators), up to the colon.

    Multi-line headers keep their lines verbatim; for one-liners the body
    after the colon is cut off.
    """
    first_stmt = node.body[0]
    if first_stmt.lineno > node.lineno:
        return "\n".join(lines[node.lineno - 1 : first_stmt.lineno - 1])
    return lines[node.lineno - 1][: first_stmt.col_offset].rstrip()


def _slice(lines: list[str], start: int, end: int) -> str:
    """Verbatim source lines start..end (1-based, inclusive)."""
    return "\n".join(lines[start - 1 : end])


def _docstring_node(node):
    if (
        node.body
        and isinstance(node.body[0], ast.Expr)
        and isinstance(node.body[0].value, ast.Constant)
        and isinstance(node.body[0].value.value, str)
    ):
        return node.body[0]
    return None


def render_class_representation(class_node: ast.ClassDef, lines: list[str]) -> str:
    """Class summary text: declaration, docstring if any, the constructor
    in full, and one signature line per remaining method (bodies elided)."""
    parts = [_header_text(class_node, lines)]
    doc = _docstring_node(class_node)
    if doc is not None:
        parts.append(_slice(lines, doc.lineno, doc.end_lineno))
    methods = [
        n
        for n in class_node.body
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))
    ]
    for m in methods:
        if m.name == "__init__":
            parts.append(_slice(lines, _decl_start(m), m.end_lineno))
    for m in methods:
        if m.name != "__init__":
            parts.append(_header_text(m, lines))
    return "\n".join(parts)


def render_chunk(chunk: Chunk, include_path: bool) -> str:
    """Retrieval text for a chunk, with or without the file-path first line."""
    prefix = chunk.file_path + "\n"
    if chunk.rendered_text.startswith(prefix):
        body = chunk.rendered_text[len(prefix):]
    else:
        body = chunk.rendered_text
    return prefix + body if include_path else body


# --- chunk extraction -------------------------------------------------------


class _IdAllocator:
    def __init__(self):
        self._seen: dict[str, int] = {}

    def allocate(self, base: str) -> str:
        n = self._seen.get(base, 0) + 1
        self._seen[base] = n
        return base if n == 1 else f"{base}#{n}"


def _make_chunk(
    file: SourceFile,
    cfg: ChunkerConfig,
    ids: _IdAllocator,
    kind: str,
    qualified_name: str,
    line_start: int,
    line_end: int,
    body_text: str,
    render_body: str,
) -> Chunk:
    chunk_id = ids.allocate(f"{file.repo_relative_path}::{qualified_name}")
    rendered = (
        f"{file.repo_relative_path}\n{render_body}" if cfg.include_path else render_body
    )
    return Chunk(
        chunk_id=chunk_id,
        kind=kind,
        qualified_name=qualified_name,
        file_path=file.repo_relative_path,
        line_start=line_start,
        line_end=line_end,
        body_text=body_text,
        rendered_text=rendered,
    )


def _class_chunks(
    file: SourceFile,
    cfg: ChunkerConfig,
    ids: _IdAllocator,
    lines: list[str],
    node: ast.ClassDef,
    prefix: str,
) -> list[Chunk]:
    qual = f"{prefix}{node.name}"
    doc = _docstring_node(node)
    decl_start = _decl_start(node)
    header_end = node.body[0].lineno - 1 if node.body[0].lineno > node.lineno else node.lineno
    rep_end = doc.end_lineno if doc is not None else header_end
    chunks = [
        _make_chunk(
            file,
            cfg,
            ids,
            KIND_CLASS,
            qual,
            decl_start,
            rep_end,
            _slice(lines, decl_start, rep_end),
            render_class_representation(node, lines),
        )
    ]
    class_header = _header_text(node, lines)
    for sub in node.body:
        if isinstance(sub, (ast.FunctionDef, ast.AsyncFunctionDef)):
            start = _decl_start(sub)
            body = _slice(lines, start, sub.end_lineno)
            chunks.append(
                _make_chunk(
                    file,
                    cfg,
                    ids,
                    KIND_METHOD,
                    f"{qual}.{sub.name}",
                    start,
                    sub.end_lineno,
                    body,
                    f"{class_header}\n{body}",
                )
            )
        elif isinstance(sub, ast.ClassDef):
            chunks.extend(_class_chunks(file, cfg, ids, lines, sub, f"{qual}."))
    return chunks


def _non_import_lines(stmts) -> int:
    return sum(
        stmt.end_lineno - stmt.lineno + 1
        for stmt in stmts
        if not isinstance(stmt, (ast.Import, ast.ImportFrom))
    )


def module_imports(file: SourceFile) -> tuple[str, ...]:
    """Source text of every import statement in the file, in source order.

    Includes imports nested in `try`/`if` guards and inside functions, so
    one table per file is enough for name resolution.
    """
    try:
        tree = ast.parse(file.content)
    except SyntaxError as exc:
        raise ParseFailure(
            file.repo_relative_path, exc.lineno or 0, exc.msg or "syntax error"
        ) from exc
    nodes = [
        n for n in ast.walk(tree) if isinstance(n, (ast.Import, ast.ImportFrom))
    ]
    nodes.sort(key=lambda n: (n.lineno, n.col_offset))
    texts = []
    for node in nodes:
        seg = ast.get_source_segment(file.content, node)
        if seg:
            texts.append(seg)
    return tuple(texts)


def chunk_file(file: SourceFile, cfg: ChunkerConfig | None = None) -> list[Chunk]:
    """Chunks of one parsed source file, in source order.

    Raises ParseFailure when the file does not parse. Nested functions stay
    inside their parent chunk; nested classes are chunked with dotted
    qualified names.
    """
    cfg = cfg or ChunkerConfig()
    try:
        tree = ast.parse(file.content)
    except SyntaxError as exc:
        raise ParseFailure(
            file.repo_relative_path, exc.lineno or 0, exc.msg or "syntax error"
        ) from exc

    lines = file.content.splitlines()
    ids = _IdAllocator()
    chunks: list[Chunk] = []
    runs: list[list[ast.stmt]] = [[]]
    for node in tree.body:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            start = _decl_start(node)
            body = _slice(lines, start, node.end_lineno)
            chunks.append(
                _make_chunk(
                    file, cfg, ids, KIND_FUNCTION, node.name,
                    start, node.end_lineno, body, body,
                )
            )
            runs.append([])
        elif isinstance(node, ast.ClassDef):
            chunks.extend(_class_chunks(file, cfg, ids, lines, node, ""))
            runs.append([])
        else:
            runs[-1].append(node)

    runs = [r for r in runs if r]
    if runs:
        best = max(runs, key=_non_import_lines)
        # A file that is nothing but one top-level run (no defs at all)
        # always yields its remainder so retained files are never chunkless.
        if chunks and _non_import_lines(best) < cfg.min_remainder_lines:
            best = None
        if best is not None:
            start = best[0].lineno
            end = best[-1].end_lineno
            body = _slice(lines, start, end)
            chunks.append(
                _make_chunk(
                    file, cfg, ids, KIND_REMAINDER, "<module>",
                    start, end, body, body,
                )
            )

    chunks.sort(key=lambda c: (c.line_start, c.line_end, c.chunk_id))
    return chunks


# --- repository walk --------------------------------------------------------


def _excluded(rel_path: Path, globs: tuple[str, ...]) -> bool:
    posix = rel_path.as_posix()
    for g in globs:
        if fnmatch.fnmatch(posix, g):
            return True
        if any(fnmatch.fnmatch(part, g) for part in rel_path.parts[:-1]):
            return True
    return False


def chunk_repository(root: str | os.PathLike, cfg: ChunkerConfig | None = None) -> ChunkSet:
    """Walk `root`, chunk every retained source file, record every skip.

    Retention filters, in order: excluded directories, extension allowlist,
    include globs, size cap, text decoding, parseability. Output ordering is
    lexicographic by file path then start line, independent of walk order.
    """
    cfg = cfg or ChunkerConfig()
    root_path = Path(root)
    if not root_path.is_dir():
        raise FileNotFoundError(f"repository root not found: {root}")

    chunks: list[Chunk] = []
    skipped: list[tuple[str, str]] = []
    file_imports: dict[str, tuple[str, ...]] = {}
    for path in sorted(p for p in root_path.rglob("*") if p.is_file()):
        rel = path.relative_to(root_path)
        rel_posix = rel.as_posix()
        if _excluded(rel, cfg.exclude_globs):
            skipped.append((rel_posix, "excluded directory"))
            continue
        if path.suffix not in cfg.extensions:
            skipped.append((rel_posix, "non-source extension"))
            continue
        if cfg.include_globs and not any(
            fnmatch.fnmatch(rel_posix, g) for g in cfg.include_globs
        ):
            skipped.append((rel_posix, "not in include globs"))
            continue
        if path.stat().st_size > cfg.max_file_bytes:
            skipped.append((rel_posix, "file too large"))
            continue
        try:
            content = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            skipped.append((rel_posix, "not valid text"))
            continue
        source = SourceFile.from_text(rel_posix, content)
        try:
            file_chunks = chunk_file(source, cfg)
        except ParseFailure as exc:
            skipped.append((rel_posix, f"syntax error: line {exc.line}"))
            continue
        if not file_chunks:
            reason = "empty file" if not content.strip() else "no extractable chunks"
            skipped.append((rel_posix, reason))
            continue
        chunks.extend(file_chunks)
        imports = module_imports(source)
        if imports:
            file_imports[rel_posix] = imports

    chunks.sort(key=lambda c: (c.file_path, c.line_start, c.line_end, c.chunk_id))
    return ChunkSet(
        repo_id=root_path.name,
        chunks=chunks,
        skipped_files=skipped,
        file_imports=file_imports,
    )


# --- chunk store ------------------------------------------------------------


def _imports_sidecar(path) -> Path:
    return Path(str(path) + ".imports.json")


def save_chunks(chunk_set: ChunkSet, path: str | os.PathLike) -> None:
    """Write one JSON record per chunk, fixed field set, one per line.

    Import statements live outside chunk spans, so they are written to a
    `<path>.imports.json` sidecar that load_chunks picks up automatically.
    """
    with open(path, "w", encoding="utf-8") as f:
        for c in chunk_set.chunks:
            record = {
                "chunk_id": c.chunk_id,
                "kind": c.kind,
                "qualified_name": c.qualified_name,
                "file_path": c.file_path,
                "line_start": c.line_start,
                "line_end": c.line_end,
                "body_text": c.body_text,
                "rendered_text": c.rendered_text,
            }
            f.write(json.dumps(record, sort_keys=False) + "\n")
    with open(_imports_sidecar(path), "w", encoding="utf-8") as f:
        json.dump(
            {fp: list(texts) for fp, texts in sorted(chunk_set.file_imports.items())},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_chunks(path: str | os.PathLike, repo_id: str | None = None) -> ChunkSet:
    """Read a chunk store; repo_id defaults to the file stem.

    A `<path>.imports.json` sidecar, when present, restores the per-file
    import tables used for call resolution.
    """
    chunks = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON") from exc
            missing = [k for k in _STORE_FIELDS if k not in record]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            chunks.append(
                Chunk(
                    chunk_id=record["chunk_id"],
                    kind=record["kind"],
                    qualified_name=record["qualified_name"],
                    file_path=record["file_path"],
                    line_start=int(record["line_start"]),
                    line_end=int(record["line_end"]),
                    body_text=record["body_text"],
                    rendered_text=record["rendered_text"],
                )
            )
    file_imports: dict[str, tuple[str, ...]] = {}
    sidecar = _imports_sidecar(path)
    if sidecar.is_file():
        with open(sidecar, encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ValueError(f"{sidecar}: expected an object mapping file to imports")
        file_imports = {fp: tuple(texts) for fp, texts in raw.items()}
    return ChunkSet(
        repo_id=repo_id if repo_id is not None else Path(path).stem,
        chunks=chunks,
        file_imports=file_imports,
    )
