#!/usr/bin/env python3
"""
Interaction data for GGCF: raw dataset loaders, per-user train/test
splitting, the normalized bipartite graph and BPR triple sampling.
"""

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
import torch
from loguru import logger

from errors import ConfigError, DegenerateInputError, EmptyDatasetError, ParseError
from validator import FIRST_DATA_LINE, SCHEMAS, IngestReport, RowValidator

SPLIT_LABELS = ("train", "test")

# Extra slack so e.g. 0.29 * 100 floors to 29 rather than 28
_FLOOR_EPS = 1e-9


@dataclass
class InteractionSet:
    """Implicit-feedback interactions over a dense user/item catalog.

    ``users[n], items[n]`` is the n-th (user, item) pair, sorted by user then
    item. ``user_ids[u]`` / ``item_ids[i]`` map dense indices back to the
    original dataset ids.
    """

    user_count: int
    item_count: int
    users: np.ndarray
    items: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    ingest_report: Optional[IngestReport] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))

    def user_index(self) -> Dict[int, int]:
        return {int(uid): u for u, uid in enumerate(self.user_ids)}

    def item_index(self) -> Dict[int, int]:
        return {int(iid): i for i, iid in enumerate(self.item_ids)}

    def positives_by_user(self) -> List[np.ndarray]:
        """Item indices per user (empty arrays for users without pairs)."""
        bounds = np.searchsorted(self.users, np.arange(self.user_count + 1))
        return [self.items[bounds[u] : bounds[u + 1]] for u in range(self.user_count)]

    def subset(self, mask: np.ndarray) -> "InteractionSet":
        """Pairs selected by ``mask`` over the same catalog."""
        return InteractionSet(
            user_count=self.user_count,
            item_count=self.item_count,
            users=self.users[mask],
            items=self.items[mask],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )


def from_pairs(
    raw_pairs: Sequence[Tuple[int, int]], ingest_report: Optional[IngestReport] = None
) -> InteractionSet:
    """Build an InteractionSet from original-id pairs (duplicates collapsed).

    Dense indices follow ascending original id, so the same pairs always get
    the same indices.
    """
    if len(raw_pairs) == 0:
        raise EmptyDatasetError("no interactions")
    raw = np.unique(np.asarray(raw_pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    user_ids, users = np.unique(raw[:, 0], return_inverse=True)
    item_ids, items = np.unique(raw[:, 1], return_inverse=True)
    order = np.lexsort((items, users))
    return InteractionSet(
        user_count=int(user_ids.shape[0]),
        item_count=int(item_ids.shape[0]),
        users=users[order].astype(np.int64),
        items=items[order].astype(np.int64),
        user_ids=user_ids,
        item_ids=item_ids,
        ingest_report=ingest_report,
    )


def _parser_error_line(error: Exception) -> Optional[int]:
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def _undecodable_line(path: Path) -> Optional[int]:
    with open(path, "rb") as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                raw.decode("utf-8")
            except UnicodeDecodeError:
                return line_number
    return None


def _read_table(path: Path, what: str, **kwargs) -> pd.DataFrame:
    """Read a delimited text file as strings; blank lines come back as empty rows."""
    try:
        return pd.read_csv(
            path, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8", **kwargs
        )
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"{path}: {what} is empty")
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed line ({e})", path=str(path), line_number=_parser_error_line(e))
    except UnicodeDecodeError as e:
        raise ParseError(f"not valid UTF-8 ({e.reason})", path=str(path), line_number=_undecodable_line(path))


def _blank_rows(df: pd.DataFrame) -> np.ndarray:
    cells = df.fillna("").astype(str).apply(lambda column: column.str.strip())
    return cells.eq("").all(axis=1).to_numpy()


def _load_raw(path, sep: str, source_type: str) -> InteractionSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    columns = SCHEMAS[source_type]["columns"]
    df = _read_table(path, "file", sep=sep, header=0)
    # physical line of every data row, so errors point past skipped blank lines
    blank = _blank_rows(df)
    line_numbers = (np.flatnonzero(~blank) + FIRST_DATA_LINE).tolist()
    df = df[~blank]

    if df.empty:
        raise EmptyDatasetError(f"{path}: no interaction lines after the header")
    if len(df.columns) != len(columns):
        raise ParseError(
            f"expected {len(columns)} columns, header has {len(df.columns)}",
            path=str(path),
            line_number=1,
        )
    df.columns = list(columns)

    pairs, report = RowValidator().validate_rows(
        df.to_dict("records"), source_type, str(path), line_numbers=line_numbers
    )
    if report.duplicate_count:
        logger.warning("Collapsed duplicate pairs", path=str(path), duplicates=report.duplicate_count)

    data = from_pairs(pairs, ingest_report=report)
    logger.info(
        f"Loaded {source_type}: {data.user_count:,} users, {data.item_count:,} items, {len(data):,} interactions",
        path=str(path),
    )
    return data


def load_movielens(path) -> InteractionSet:
    """Load a MovieLens ``ratings.csv`` (userId,movieId,rating,timestamp); every rating counts."""
    return _load_raw(path, ",", "movielens")


def load_lastfm(path) -> InteractionSet:
    """Load a HetRec LastFM ``user_artists.dat`` (userID<TAB>artistID<TAB>weight)."""
    return _load_raw(path, "\t", "lastfm")


LOADERS = {
    "movielens": load_movielens,
    "lastfm": load_lastfm,
}


def dataset_summary(data: InteractionSet) -> Dict[str, float]:
    """User / item / interaction counts and density."""
    interactions = len(data)
    return {
        "users": data.user_count,
        "items": data.item_count,
        "interactions": interactions,
        "density": interactions / float(data.user_count * data.item_count),
    }


def split(data: InteractionSet, train_fraction: float, seed: int) -> Tuple[InteractionSet, InteractionSet]:
    """Per-user random split: floor(fraction * |N_u|) pairs (at least one) go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(seed)
    in_train = np.zeros(len(data), dtype=bool)
    bounds = np.searchsorted(data.users, np.arange(data.user_count + 1))
    for u in range(data.user_count):
        start, stop = bounds[u], bounds[u + 1]
        n = stop - start
        if n == 0:
            continue
        n_train = max(1, math.floor(train_fraction * n + _FLOOR_EPS))
        chosen = rng.permutation(n)[:n_train]
        in_train[start + chosen] = True

    train, test = data.subset(in_train), data.subset(~in_train)
    logger.info("Split complete", train=len(train), test=len(test), seed=seed)
    return train, test


def save_split(train: InteractionSet, test: InteractionSet, path) -> str:
    """Freeze a split as ``u<TAB>i<TAB>{train|test}`` lines of original ids.

    Lines are ordered by dense user then dense item, so the same split always
    produces the same bytes. Returns the SHA-256 of the file.
    """
    users = np.concatenate([train.users, test.users])
    items = np.concatenate([train.items, test.items])
    labels = np.concatenate([np.zeros(len(train), dtype=np.int8), np.ones(len(test), dtype=np.int8)])
    order = np.lexsort((items, users))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for n in order:
            f.write(f"{train.user_ids[users[n]]}\t{train.item_ids[items[n]]}\t{SPLIT_LABELS[labels[n]]}\n")

    logger.info(f"Split saved to: {path}")
    return file_hash(path)


def load_split(path) -> Tuple[InteractionSet, InteractionSet]:
    """Read a frozen split written by ``save_split``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    df = _read_table(path, "split file", sep="\t", header=None, names=["user", "item", "part"])

    bad = ~df["part"].isin(SPLIT_LABELS)
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise ParseError(f"unknown split label {df['part'][line - 1]!r}", path=str(path), line_number=line)
    try:
        users = df["user"].astype(np.int64).to_numpy()
        items = df["item"].astype(np.int64).to_numpy()
    except ValueError as e:
        raise ParseError(f"non-integer id ({e})", path=str(path))

    data = from_pairs(np.stack([users, items], axis=1))
    if len(data) != len(df):
        raise ParseError("split file lists a pair more than once", path=str(path))

    # map each file row onto its dense pair position
    user_index = np.searchsorted(data.user_ids, users)
    item_index = np.searchsorted(data.item_ids, items)
    codes = data.users * data.item_count + data.items
    positions = np.searchsorted(codes, user_index * data.item_count + item_index)
    in_train = np.zeros(len(data), dtype=bool)
    in_train[positions[(df["part"] == "train").to_numpy()]] = True
    return data.subset(in_train), data.subset(~in_train)


def file_hash(path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class InteractionGraph:
    """Bipartite user-item graph with weights w_ui = 1 / (sqrt|N_u| sqrt|N_i|).

    ``adjacency`` is the U x I CSR matrix (rows = users), ``reverse`` its
    I x U transpose. The torch COO copies feed the propagation products.
    """

    user_count: int
    item_count: int
    adjacency: sp.csr_matrix
    reverse: sp.csr_matrix
    user_degree: np.ndarray
    item_degree: np.ndarray
    user_to_item: torch.Tensor = field(repr=False)
    item_to_user: torch.Tensor = field(repr=False)
    edge_codes: np.ndarray = field(repr=False)

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """(users, items) of every edge in CSR order."""
        users = np.repeat(np.arange(self.user_count, dtype=np.int64), np.diff(self.adjacency.indptr))
        return users, self.adjacency.indices.astype(np.int64)

    def positives_by_user(self) -> List[np.ndarray]:
        a = self.adjacency
        return [a.indices[a.indptr[u] : a.indptr[u + 1]] for u in range(self.user_count)]

    def has_edge(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorised membership test for (user, item) pairs."""
        codes = np.asarray(users, dtype=np.int64) * self.item_count + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.edge_codes, codes)
        pos = np.minimum(pos, max(len(self.edge_codes) - 1, 0))
        return self.edge_codes[pos] == codes


def _torch_sparse(matrix: sp.csr_matrix) -> torch.Tensor:
    coo = matrix.tocoo()
    indices = torch.from_numpy(np.vstack((coo.row, coo.col)).astype(np.int64))
    values = torch.from_numpy(coo.data.astype(np.float64))
    return torch.sparse_coo_tensor(indices, values, coo.shape, dtype=torch.float64).coalesce()


def build_graph(train: InteractionSet) -> InteractionGraph:
    """Normalized bipartite graph over the full catalog; isolated nodes are kept."""
    if len(train) == 0:
        raise DegenerateInputError("cannot build a graph from an empty training set")

    U, I = train.user_count, train.item_count
    user_degree = np.bincount(train.users, minlength=U).astype(np.int64)
    item_degree = np.bincount(train.items, minlength=I).astype(np.int64)
    weights = 1.0 / (np.sqrt(user_degree[train.users]) * np.sqrt(item_degree[train.items]))

    adjacency = sp.csr_matrix((weights, (train.users, train.items)), shape=(U, I), dtype=np.float64)
    adjacency.sort_indices()
    reverse = adjacency.T.tocsr()
    reverse.sort_indices()

    users = np.repeat(np.arange(U, dtype=np.int64), np.diff(adjacency.indptr))
    edge_codes = users * I + adjacency.indices.astype(np.int64)

    logger.debug("Graph built", users=U, items=I, edges=int(adjacency.nnz))
    return InteractionGraph(
        user_count=U,
        item_count=I,
        adjacency=adjacency,
        reverse=reverse,
        user_degree=user_degree,
        item_degree=item_degree,
        user_to_item=_torch_sparse(adjacency),
        item_to_user=_torch_sparse(reverse),
        edge_codes=edge_codes,
    )


class BprTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


@dataclass
class BprTriples:
    """A batch of BPR triples stored column-wise."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    skipped_users: int = 0

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def __iter__(self) -> Iterator[BprTriple]:
        for u, i, j in zip(self.users.tolist(), self.pos_items.tolist(), self.neg_items.tolist()):
            yield BprTriple(u, i, j)

    def batches(self, batch_size: int) -> Iterator["BprTriples"]:
        for start in range(0, len(self), batch_size):
            stop = start + batch_size
            yield BprTriples(self.users[start:stop], self.pos_items[start:stop], self.neg_items[start:stop])

    @classmethod
    def from_list(cls, triples: Sequence[Tuple[int, int, int]]) -> "BprTriples":
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


def _eligible_edges(graph: InteractionGraph) -> Tuple[np.ndarray, np.ndarray, int]:
    users, items = graph.edges()
    full = graph.user_degree >= graph.item_count
    skipped = int(np.count_nonzero(full & (graph.user_degree > 0)))
    if skipped:
        logger.warning("Skipping users that interact with every item", skipped_users=skipped)
    keep = ~full[users]
    return users[keep], items[keep], skipped


def _draw_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    negatives = rng.integers(0, graph.item_count, size=users.shape[0], dtype=np.int64)
    pending = np.flatnonzero(graph.has_edge(users, negatives))
    while pending.size:
        negatives[pending] = rng.integers(0, graph.item_count, size=pending.size, dtype=np.int64)
        pending = pending[graph.has_edge(users[pending], negatives[pending])]
    return negatives


def sample_triples(graph: InteractionGraph, count: int, rng: np.random.Generator) -> BprTriples:
    """Draw ``count`` triples: uniform training edge, then a uniform non-positive item."""
    empty = np.zeros(0, dtype=np.int64)
    if count <= 0:
        return BprTriples(empty, empty.copy(), empty.copy())

    users, items, skipped = _eligible_edges(graph)
    if users.size == 0:
        raise DegenerateInputError("every user interacts with every item; no negatives exist")

    picks = rng.integers(0, users.size, size=count, dtype=np.int64)
    users, items = users[picks], items[picks]
    return BprTriples(users, items, _draw_negatives(graph, users, rng), skipped_users=skipped)


def sample_epoch(graph: InteractionGraph, rng: np.random.Generator) -> BprTriples:
    """One epoch: every training edge once, shuffled, each with one fresh negative."""
    users, items, skipped = _eligible_edges(graph)
    if users.size == 0:
        raise DegenerateInputError("every user interacts with every item; no negatives exist")

    order = rng.permutation(users.size)
    users, items = users[order], items[order]
    return BprTriples(users, items, _draw_negatives(graph, users, rng), skipped_users=skipped)
