"""
Dataset bundles: loading, manifests, converters and built-in fixtures.

A bundle is a directory holding

    edges.tsv      one `i<TAB>j` per undirected edge
    features.tsv   `node<TAB>idx:val idx:val ...`, binarized on load (optional;
                   identity features are injected when absent)
    labels.tsv     `node<TAB>label`
    splits.tsv     `node<TAB>train|val|test|none`
    manifest.toml  name, n, edges, d, C, digest and per-file sha256 digests

Names of the form `fixture:<name>` resolve to small built-in graphs.
"""

import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import tomlkit
from tomlkit.exceptions import TOMLKitError

from stsparse.errors import ContractError, DataIntegrityError, ParseError
from stsparse.models.graph import CsrMatrix, Graph
from stsparse.models.records import DatasetBundle, DatasetManifest
from stsparse.services.graph_ops import adjacency_from_edges

BUNDLE_FILES = ("edges.tsv", "features.tsv", "labels.tsv", "splits.tsv")
SPLIT_NAMES = ("train", "val", "test", "none")

# Published statistics (nodes, raw edge lines, features, classes) of the
# benchmark graphs. Manifests record the deduplicated undirected edge count.
PUBLISHED_STATISTICS = {
    "cora": (2708, 5429, 1433, 7),
    "citeseer": (3327, 4732, 3703, 6),
    "polblogs": (1490, 33430, 1490, 2),
}


def published_mismatches(name: str, graph: Graph) -> Dict[str, Tuple[int, int]]:
    """
    Fields where a converted benchmark differs from its published statistics,
    as `field -> (published, observed)`. Unknown names compare against nothing.

    Edge counts differ whenever the raw citation list holds duplicates or
    reversed pairs, since bundles keep each undirected edge once.
    """
    published = PUBLISHED_STATISTICS.get(name.lower())
    if published is None:
        return {}
    observed = (graph.n, graph.edge_count, graph.d, graph.n_classes)
    return {
        field: (expected, actual)
        for field, expected, actual in zip(("n", "edges", "d", "n_classes"), published, observed)
        if expected != actual
    }


def file_digest(path: Union[str, Path]) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def combined_digest(files: Dict[str, str]) -> str:
    """Digest over the sorted `name:digest` lines of the bundle files."""
    payload = "".join(f"{name}:{files[name]}\n" for name in sorted(files))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


# Manifest


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    try:
        doc = tomlkit.parse(path.read_text(encoding="utf-8"))
    except TOMLKitError as e:
        raise DataIntegrityError("manifest", f"{path}: {e}") from e
    try:
        files = {str(k): str(v) for k, v in doc.get("files", {}).items()}
        return DatasetManifest(
            name=str(doc["name"]),
            n=int(doc["n"]),
            edges=int(doc["edges"]),
            d=int(doc["d"]),
            n_classes=int(doc["C"]),
            digest=str(doc.get("digest", "")),
            files=files,
        )
    except KeyError as e:
        raise DataIntegrityError(str(e.args[0]), f"{path}: missing manifest key {e}") from e


def write_manifest(path: Union[str, Path], manifest: DatasetManifest):
    doc = tomlkit.document()
    doc.add("name", manifest.name)
    doc.add("n", manifest.n)
    doc.add("edges", manifest.edges)
    doc.add("d", manifest.d)
    doc.add("C", manifest.n_classes)
    doc.add("digest", manifest.digest)
    files = tomlkit.table()
    for name in sorted(manifest.files):
        files.add(name, manifest.files[name])
    doc.add("files", files)
    _atomic_write(Path(path), tomlkit.dumps(doc))


# Parsing


def _lines(path: Path):
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield line_number, stripped


def _node_id(token: str, n: int, path: Path, line_number: int) -> int:
    try:
        node = int(token)
    except ValueError:
        raise ParseError(str(path), line_number, f"node id {token!r} is not an integer")
    if not 0 <= node < n:
        raise ParseError(str(path), line_number, f"node id {node} outside [0, {n})")
    return node


def parse_edges(path: Path, n: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    self_loops = 0
    for line_number, line in _lines(path):
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ParseError(str(path), line_number, "expected 'i<TAB>j'")
        i = _node_id(parts[0], n, path, line_number)
        j = _node_id(parts[1], n, path, line_number)
        if len(parts) == 3:
            try:
                weight = float(parts[2])
            except ValueError:
                raise ParseError(str(path), line_number, f"edge weight {parts[2]!r} is not a number")
            if weight != 1.0:
                raise DataIntegrityError("edges", f"{path}:{line_number}: edge weight {weight} is not 1")
        if i == j:
            self_loops += 1
            continue
        rows.append(i)
        cols.append(j)
    if self_loops:
        logging.warning(f"{path}: skipped {self_loops} self-loop lines")
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def parse_features(path: Path, n: int, d: int) -> CsrMatrix:
    rows, cols = [], []
    for line_number, line in _lines(path):
        parts = line.split()
        node = _node_id(parts[0], n, path, line_number)
        for token in parts[1:]:
            index, sep, value = token.partition(":")
            if not sep:
                raise ParseError(str(path), line_number, f"expected 'idx:val', got {token!r}")
            try:
                column, weight = int(index), float(value)
            except ValueError:
                raise ParseError(str(path), line_number, f"malformed feature pair {token!r}")
            if not 0 <= column < d:
                raise DataIntegrityError("d", f"{path}:{line_number}: feature index {column} outside [0, {d})")
            if weight != 0:
                rows.append(node)
                cols.append(column)
    matrix = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, d)).tocsr()
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    return CsrMatrix.from_scipy(matrix)


def parse_labels(path: Path, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    for line_number, line in _lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(str(path), line_number, "expected 'node<TAB>label'")
        node = _node_id(parts[0], n, path, line_number)
        try:
            labels[node] = int(parts[1])
        except ValueError:
            raise ParseError(str(path), line_number, f"label {parts[1]!r} is not an integer")
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise DataIntegrityError("labels", f"{path}: {missing.size} nodes have no label")
    return labels


def parse_splits(path: Path, n: int) -> Dict[str, np.ndarray]:
    masks = {name: np.zeros(n, dtype=bool) for name in SPLIT_NAMES}
    for line_number, line in _lines(path):
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLIT_NAMES:
            raise ParseError(str(path), line_number, "expected 'node<TAB>train|val|test|none'")
        node = _node_id(parts[0], n, path, line_number)
        masks[parts[1]][node] = True
    return masks


# Splits


def planetoid_split(
    labels: np.ndarray,
    seed: int = 0,
    per_class: int = 20,
    n_val: int = 500,
    n_test: int = 1000,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Semi-supervised split: per_class training nodes per class, then n_val
    validation and n_test test nodes drawn from the rest.

    On small graphs the counts shrink so that every part stays non-empty.
    """
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    train = np.zeros(n, dtype=bool)
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        take = min(per_class, max(1, len(members) // 3))
        train[members[:take]] = True
    rest = rng.permutation(np.flatnonzero(~train))
    val_count = min(n_val, max(1, len(rest) // 2))
    test_count = min(n_test, len(rest) - val_count)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:val_count]] = True
    test[rest[val_count:val_count + test_count]] = True
    return train, val, test


# Loading


def _check(field: str, expected: int, actual: int, path: Path):
    if expected != actual:
        raise DataIntegrityError(field, f"{path}: manifest declares {field}={expected}, data has {actual}")


def load_dataset(path: Union[str, Path], name: str) -> DatasetBundle:
    """
    Load a dataset bundle and check it against its manifest.

    `path` is either the bundle directory or a directory containing
    `<name>/`. Duplicate and reversed edge lines collapse to one edge.
    """
    if name.startswith("fixture:"):
        return load_fixture(name)

    root = Path(path)
    if (root / name / "manifest.toml").exists():
        root = root / name
    manifest_path = root / "manifest.toml"
    if not manifest_path.exists():
        raise DataIntegrityError("manifest", f"{root}: no manifest.toml")
    manifest = read_manifest(manifest_path)

    provenance = {}
    for file_name in BUNDLE_FILES:
        file_path = root / file_name
        if file_path.exists():
            provenance[file_name] = file_digest(file_path)
    for file_name, digest in manifest.files.items():
        if provenance.get(file_name) != digest:
            raise DataIntegrityError(f"digest:{file_name}", f"{root}: digest of {file_name} does not match the manifest")
    if manifest.digest and manifest.files and combined_digest(provenance) != manifest.digest:
        raise DataIntegrityError("digest", f"{root}: combined digest does not match the manifest")
    for required in ("edges.tsv", "labels.tsv"):
        if required not in provenance:
            raise DataIntegrityError(required, f"{root}: missing {required}")

    n = manifest.n
    rows, cols = parse_edges(root / "edges.tsv", n)
    adjacency = adjacency_from_edges(n, rows, cols)
    if "features.tsv" in provenance:
        features = parse_features(root / "features.tsv", n, manifest.d).to_dense()
    else:
        logging.info(f"{name}: no features.tsv, injecting identity features")
        features = np.eye(n)
    labels = parse_labels(root / "labels.tsv", n)
    if "splits.tsv" in provenance:
        masks = parse_splits(root / "splits.tsv", n)
        train, val, test = masks["train"], masks["val"], masks["test"]
    else:
        logging.warning(f"{name}: no splits.tsv, drawing a seeded semi-supervised split")
        train, val, test = planetoid_split(labels)

    _check("edges", manifest.edges, adjacency.nnz // 2, root)
    _check("d", manifest.d, features.shape[1], root)
    n_classes = int(labels.max()) + 1 if n else 0
    _check("C", manifest.n_classes, n_classes, root)

    graph = Graph(
        adjacency=adjacency,
        features=features,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        n_classes=manifest.n_classes,
        name=name,
    )
    logging.info(
        f"Loaded {name}: n={graph.n} edges={graph.edge_count} d={graph.d} C={graph.n_classes} "
        f"train/val/test={int(train.sum())}/{int(val.sum())}/{int(test.sum())} "
        f"digest={combined_digest(provenance)[:12]}"
    )
    return DatasetBundle(name=name, graph=graph, provenance=provenance, manifest=manifest)


# Writing and converters


def write_bundle(out_dir: Union[str, Path], graph: Graph, name: str, identity_features: bool = False) -> DatasetManifest:
    """Write a graph as a bundle directory with a fresh manifest."""
    out_dir = Path(out_dir)
    low, high = graph.edge_list()
    _atomic_write(out_dir / "edges.tsv", "".join(f"{i}\t{j}\n" for i, j in zip(low, high)))
    if not identity_features:
        feature_lines = []
        for node in range(graph.n):
            nonzero = np.flatnonzero(graph.features[node])
            pairs = " ".join(f"{k}:1" for k in nonzero)
            feature_lines.append(f"{node}\t{pairs}\n")
        _atomic_write(out_dir / "features.tsv", "".join(feature_lines))
    _atomic_write(out_dir / "labels.tsv", "".join(f"{i}\t{c}\n" for i, c in enumerate(graph.labels)))
    split_lines = []
    for node in range(graph.n):
        if graph.train_mask[node]:
            part = "train"
        elif graph.val_mask[node]:
            part = "val"
        elif graph.test_mask[node]:
            part = "test"
        else:
            part = "none"
        split_lines.append(f"{node}\t{part}\n")
    _atomic_write(out_dir / "splits.tsv", "".join(split_lines))

    files = {f: file_digest(out_dir / f) for f in BUNDLE_FILES if (out_dir / f).exists()}
    manifest = DatasetManifest(
        name=name,
        n=graph.n,
        edges=graph.edge_count,
        d=graph.d,
        n_classes=graph.n_classes,
        digest=combined_digest(files),
        files=files,
    )
    write_manifest(out_dir / "manifest.toml", manifest)
    logging.info(f"Wrote bundle {name} to {out_dir} (n={graph.n}, edges={graph.edge_count})")
    for field, (expected, actual) in published_mismatches(name, graph).items():
        logging.warning(f"{name}: {field}={actual} differs from the published {expected}")
    return manifest


def _graph_from_parts(
    name: str, adjacency: CsrMatrix, features: np.ndarray, labels: np.ndarray, seed: int
) -> Graph:
    train, val, test = planetoid_split(labels, seed=seed)
    return Graph(
        adjacency=adjacency,
        features=features,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        name=name,
    )


def convert_linqs(content_path: Union[str, Path], cites_path: Union[str, Path], name: str, seed: int = 0) -> Graph:
    """
    Read a LINQS `.content`/`.cites` pair.

    Content lines are `<paper> <w_1> ... <w_d> <label>`; citations pointing
    at papers absent from the content file are skipped.
    """
    content_path, cites_path = Path(content_path), Path(cites_path)
    ids: Dict[str, int] = {}
    feature_rows: List[np.ndarray] = []
    label_names: List[str] = []
    width = None
    for line_number, line in _lines(content_path):
        parts = line.split()
        if len(parts) < 3:
            raise ParseError(str(content_path), line_number, "expected '<paper> <words...> <label>'")
        if width is None:
            width = len(parts) - 2
        elif len(parts) - 2 != width:
            raise ParseError(str(content_path), line_number, f"expected {width} feature columns")
        if parts[0] in ids:
            raise ParseError(str(content_path), line_number, f"duplicate paper id {parts[0]!r}")
        ids[parts[0]] = len(ids)
        try:
            feature_rows.append(np.array([float(v) for v in parts[1:-1]]) != 0)
        except ValueError:
            raise ParseError(str(content_path), line_number, "non-numeric feature value")
        label_names.append(parts[-1])

    rows, cols = [], []
    dangling = 0
    for line_number, line in _lines(cites_path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(str(cites_path), line_number, "expected '<cited> <citing>'")
        if parts[0] not in ids or parts[1] not in ids:
            dangling += 1
            continue
        rows.append(ids[parts[0]])
        cols.append(ids[parts[1]])
    if dangling:
        logging.warning(f"{cites_path}: skipped {dangling} citations to unknown papers")

    classes = sorted(set(label_names))
    labels = np.array([classes.index(label) for label in label_names], dtype=np.int64)
    features = np.vstack(feature_rows).astype(np.float64)
    adjacency = adjacency_from_edges(len(ids), rows, cols)
    return _graph_from_parts(name, adjacency, features, labels, seed)


def convert_npz(npz_path: Union[str, Path], name: str, seed: int = 0) -> Tuple[Graph, bool]:
    """
    Read an npz archive in the compressed-sparse layout (adj_data, adj_indices,
    adj_indptr, adj_shape, optional attr_* and labels).

    Returns the graph and whether identity features were injected.
    """
    with np.load(npz_path, allow_pickle=False) as archive:
        keys = set(archive.files)
        if not {"adj_data", "adj_indices", "adj_indptr", "adj_shape", "labels"} <= keys:
            raise DataIntegrityError("npz", f"{npz_path}: missing adjacency or label arrays")
        adj = sp.csr_matrix(
            (archive["adj_data"], archive["adj_indices"], archive["adj_indptr"]),
            shape=tuple(archive["adj_shape"]),
        )
        if {"attr_data", "attr_indices", "attr_indptr", "attr_shape"} <= keys:
            attr = sp.csr_matrix(
                (archive["attr_data"], archive["attr_indices"], archive["attr_indptr"]),
                shape=tuple(archive["attr_shape"]),
            )
            features, identity = (attr.toarray() != 0).astype(np.float64), False
        else:
            features, identity = np.eye(adj.shape[0]), True
        labels = np.asarray(archive["labels"], dtype=np.int64)

    coo = sp.triu(adj + adj.T, k=1).tocoo()
    adjacency = adjacency_from_edges(adj.shape[0], coo.row, coo.col)
    return _graph_from_parts(name, adjacency, features, labels, seed), identity


# Fixtures


def _fixture(
    name: str,
    n: int,
    edges: List[Tuple[int, int]],
    features: List[List[int]],
    labels: List[int],
    train: List[int],
    val: List[int],
    test: List[int],
) -> Graph:
    def mask(nodes):
        out = np.zeros(n, dtype=bool)
        out[list(nodes)] = True
        return out

    rows = [e[0] for e in edges]
    cols = [e[1] for e in edges]
    return Graph(
        adjacency=adjacency_from_edges(n, rows, cols),
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        train_mask=mask(train),
        val_mask=mask(val),
        test_mask=mask(test),
        name=name,
    )


def fixture_path2() -> Graph:
    """Two nodes joined by one edge."""
    return _fixture("fixture:path2", 2, [(0, 1)], [[1, 0], [0, 1]], [0, 1], [0], [1], [])


def fixture_toy4() -> Graph:
    """Four-node path 0-1-2-3 with two classes."""
    return _fixture(
        "fixture:toy4",
        4,
        [(0, 1), (1, 2), (2, 3)],
        [[1, 0, 1], [1, 1, 0], [0, 1, 1], [0, 0, 1]],
        [0, 0, 1, 1],
        [0, 3],
        [1],
        [2],
    )


def fixture_toy6() -> Graph:
    """Two triangles joined by the bridge 2-3."""
    return _fixture(
        "fixture:toy6",
        6,
        [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)],
        [
            [1, 1, 0, 0],
            [1, 0, 1, 0],
            [1, 1, 1, 0],
            [0, 1, 0, 1],
            [0, 0, 1, 1],
            [0, 1, 1, 1],
        ],
        [0, 0, 0, 1, 1, 1],
        [0, 1, 4, 5],
        [2],
        [3],
    )


def fixture_clusters8() -> Graph:
    """Two 4-cliques joined by the edge 3-4; features separate the clusters."""
    left = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    right = [(i + 4, j + 4) for i, j in left]
    return _fixture(
        "fixture:clusters8",
        8,
        left + right + [(3, 4)],
        [
            [1, 1, 0, 0, 0, 0],
            [1, 0, 1, 0, 0, 0],
            [0, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [0, 0, 0, 1, 1, 0],
            [0, 0, 0, 1, 0, 1],
            [0, 0, 0, 0, 1, 1],
            [0, 0, 0, 1, 1, 1],
        ],
        [0, 0, 0, 0, 1, 1, 1, 1],
        [0, 1, 4, 5],
        [2, 6],
        [3, 7],
    )


FIXTURES: Dict[str, Callable[[], Graph]] = {
    "fixture:path2": fixture_path2,
    "fixture:toy4": fixture_toy4,
    "fixture:toy6": fixture_toy6,
    "fixture:clusters8": fixture_clusters8,
}


def load_fixture(name: str) -> DatasetBundle:
    if name not in FIXTURES:
        raise ContractError(f"unknown fixture {name!r}; available: {sorted(FIXTURES)}")
    graph = FIXTURES[name]()
    return DatasetBundle(name=name, graph=graph, provenance={"builtin": name})


def resolve_dataset(name: str, data_dir: Optional[Union[str, Path]]) -> DatasetBundle:
    """Load a fixture or a bundle under data_dir."""
    return load_dataset(data_dir or ".", name)
