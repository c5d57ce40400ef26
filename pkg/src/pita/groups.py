"""Substitution groups and the ingredient/group distance matrices.

Groups are connected components of a curated similarity graph: candidate
pairs come from word-embedding cosine similarity, a human verdict file
keeps or drops them, and components of the surviving edges partition the
vocabulary. Distances are 0 within a group and cosine distance across
groups; group-level distances use group centroids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import read_matrix, write_matrix
from .errors import InvalidVerdict, ParseError, VocabularyMismatch, ZeroNormCentroid, ZeroNormEmbedding

VERDICTS = ("approve", "reject", "add")


@dataclass(frozen=True)
class SubstitutionModel:
    """Partition of the vocabulary plus the derived cost matrices.

    groups    list of index lists, sorted by smallest member
    group_of  length-I array mapping ingredient -> group id
    G         g x I binary membership matrix (each column sums to 1)
    M         I x I ingredient distance matrix
    M1        g x g group (centroid) distance matrix
    """

    groups: tuple[tuple[int, ...], ...]
    group_of: np.ndarray
    G: np.ndarray
    M: np.ndarray
    M1: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_ingredients(self) -> int:
        return self.group_of.shape[0]


def _cosine_matrix(em: np.ndarray, context: str) -> np.ndarray:
    norms = np.linalg.norm(em, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroNormEmbedding(f"{context}: embedding row {bad} has zero norm")
    unit = em / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def propose_pairs(em: np.ndarray, threshold: float = 0.6) -> list[tuple[int, int]]:
    """All unordered pairs with cosine similarity strictly above threshold."""
    em = np.asarray(em, dtype=np.float64)
    if not -1.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (-1, 1), got {threshold}")
    cos = _cosine_matrix(em, "propose_pairs")
    n = em.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    keep = cos[iu, ju] > threshold
    return [(int(i), int(j)) for i, j in zip(iu[keep], ju[keep])]


def apply_verdicts(proposed, verdicts) -> list[tuple[int, int]]:
    """Keep approved proposals, drop rejected and unreviewed ones, add extras.

    verdicts: iterable of (index a, index b, verdict) with verdict in
    {"approve", "reject", "add"}.
    """
    proposed_set = {tuple(sorted(p)) for p in proposed}
    approved = set()
    added = set()
    seen = set()
    for a, b, verdict in verdicts:
        a, b = int(a), int(b)
        if a == b:
            raise InvalidVerdict(f"verdict on self-pair ({a}, {b})")
        if verdict not in VERDICTS:
            raise InvalidVerdict(f"unknown verdict {verdict!r} for pair ({a}, {b})")
        key = tuple(sorted((a, b)))
        if key in seen:
            raise InvalidVerdict(f"multiple verdicts for pair {key}")
        seen.add(key)
        if verdict == "approve":
            approved.add(key)
        elif verdict == "add":
            added.add(key)
    edges = (proposed_set & approved) | added
    return sorted(edges)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(size: int, edges) -> list[list[int]]:
    """Partition 0..size-1 into components; isolated nodes become singletons.

    Components are sorted by smallest member, members ascending.
    """
    uf = _UnionFind(size)
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < size and 0 <= b < size):
            raise VocabularyMismatch(f"edge ({a}, {b}) outside 0..{size - 1}")
        uf.union(a, b)
    members: dict[int, list[int]] = {}
    for i in range(size):
        members.setdefault(uf.find(i), []).append(i)
    return [members[root] for root in sorted(members)]


def build_distance_matrix(partition, em: np.ndarray) -> np.ndarray:
    """0 within a group, 1 - cos(em_i, em_j) across groups."""
    em = np.asarray(em, dtype=np.float64)
    n = em.shape[0]
    group_of = partition_labels(partition, n)
    same = group_of[:, None] == group_of[None, :]
    norms = np.linalg.norm(em, axis=1)
    if np.any((norms == 0) & ~np.all(same, axis=1)):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroNormEmbedding(f"build_distance_matrix: zero-norm row {bad} in a cross-group pair")
    unit = np.divide(em, norms[:, None], out=np.zeros_like(em), where=norms[:, None] > 0)
    M = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    M[same] = 0.0
    M = 0.5 * (M + M.T)  # kill asymmetric rounding residue
    np.fill_diagonal(M, 0.0)
    return np.maximum(M, 0.0)


def build_group_distance_matrix(partition, em: np.ndarray) -> np.ndarray:
    """Cosine distance between group centroids, zero diagonal."""
    em = np.asarray(em, dtype=np.float64)
    centroids = np.stack([em[list(g)].mean(axis=0) for g in partition])
    norms = np.linalg.norm(centroids, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroNormCentroid(f"group {bad} centroid has zero norm")
    unit = centroids / norms[:, None]
    M1 = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    M1 = 0.5 * (M1 + M1.T)
    np.fill_diagonal(M1, 0.0)
    return np.maximum(M1, 0.0)


def partition_labels(partition, size: int) -> np.ndarray:
    """Group id per ingredient; validates the partition covers 0..size-1 once."""
    group_of = np.full(size, -1, dtype=np.int64)
    for gid, group in enumerate(partition):
        for k in group:
            k = int(k)
            if k < 0 or k >= size:
                raise VocabularyMismatch(f"partition member {k} outside 0..{size - 1}")
            if group_of[k] != -1:
                raise VocabularyMismatch(f"ingredient {k} appears in two groups")
            group_of[k] = gid
    if np.any(group_of == -1):
        missing = int(np.flatnonzero(group_of == -1)[0])
        raise VocabularyMismatch(f"ingredient {missing} missing from partition")
    return group_of


def membership_matrix(partition, size: int) -> np.ndarray:
    """Binary g x I matrix with G[g, k] = 1 iff ingredient k is in group g."""
    group_of = partition_labels(partition, size)
    G = np.zeros((len(partition), size), dtype=np.float64)
    G[group_of, np.arange(size)] = 1.0
    return G


def build_substitution_model(partition, em: np.ndarray) -> SubstitutionModel:
    """Assemble the full model from a partition and ingredient embeddings."""
    em = np.asarray(em, dtype=np.float64)
    size = em.shape[0]
    canonical = tuple(tuple(sorted(int(k) for k in g)) for g in partition)
    canonical = tuple(sorted(canonical, key=lambda g: g[0]))
    return SubstitutionModel(
        groups=canonical,
        group_of=partition_labels(canonical, size),
        G=membership_matrix(canonical, size),
        M=build_distance_matrix(canonical, em),
        M1=build_group_distance_matrix(canonical, em),
    )


def collapse_amounts(v: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Sum amounts over each group: v1 = G @ v. Mass is conserved."""
    return np.asarray(G, dtype=np.float64) @ np.asarray(v, dtype=np.float64)


def collapse_detection(y: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Group is detected iff any member is: y1 = 1{G @ y > 0}."""
    return (np.asarray(G, dtype=np.float64) @ np.asarray(y, dtype=np.float64) > 0).astype(np.float64)


def load_verdicts(path, vocabulary) -> list[tuple[int, int, str]]:
    """Read the TSV verdict file (name_a, name_b, verdict) into index triples."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(parts)}", path=path, line=line_no)
            name_a, name_b, verdict = parts
            if verdict not in VERDICTS:
                raise ParseError(f"unknown verdict {verdict!r}", path=path, line=line_no)
            triples.append((vocabulary.index_of(name_a), vocabulary.index_of(name_b), verdict))
    return triples


def save_groups(partition, path) -> None:
    obj = {"groups": [[int(k) for k in g] for g in partition]}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_groups(path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=path) from None
    if not isinstance(obj, dict) or "groups" not in obj:
        raise ParseError("expected an object with a 'groups' key", path=path)
    return [[int(k) for k in g] for g in obj["groups"]]


def save_substitution(model: SubstitutionModel, out_dir) -> None:
    """Write groups.json plus the M / M1 / G matrices in the binary format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_groups(model.groups, out / "groups.json")
    write_matrix(out / "M.bin", model.M)
    write_matrix(out / "M1.bin", model.M1)
    write_matrix(out / "G.bin", model.G)


def load_substitution(in_dir) -> SubstitutionModel:
    src = Path(in_dir)
    partition = load_groups(src / "groups.json")
    M = read_matrix(src / "M.bin")
    M1 = read_matrix(src / "M1.bin")
    size = M.shape[0]
    canonical = tuple(tuple(sorted(int(k) for k in g)) for g in partition)
    canonical = tuple(sorted(canonical, key=lambda g: g[0]))
    return SubstitutionModel(
        groups=canonical,
        group_of=partition_labels(canonical, size),
        G=membership_matrix(canonical, size),
        M=M,
        M1=M1,
    )
