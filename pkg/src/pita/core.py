"""Data model, file formats, and amount/detection vector algebra.

Amounts are relative masses: each recipe's ingredient masses are rescaled
so they sum to a fixed constant C (1000 g by default), which makes recipes
invariant to serving size.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateIngredient,
    EmptyRecipe,
    ParseError,
    VocabularyMismatch,
)

MATRIX_MAGIC = b"PITAEMB1"
DEFAULT_AMOUNT_CONSTANT = 1000.0


def write_matrix(path, matrix) -> None:
    """Write a 2-D array as magic + u32 count + u32 dim + f32 LE rows."""
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read the binary matrix format back as float64."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MATRIX_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}", path=path)
        header = fh.read(8)
        if len(header) != 8:
            raise ParseError("truncated header", path=path)
        count, dim = struct.unpack("<II", header)
        data = fh.read()
    expected = count * dim * 4
    if len(data) != expected:
        raise ParseError(f"expected {expected} payload bytes, got {len(data)}", path=path)
    m = np.frombuffer(data, dtype="<f4").reshape(count, dim)
    if not np.isfinite(m).all():
        raise ParseError("non-finite entries in matrix payload", path=path)
    return m.astype(np.float64)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered canonical ingredient names; index = position."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ParseError("vocabulary is empty")
        if len(set(self.names)) != len(self.names):
            raise ParseError("duplicate ingredient names in vocabulary")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyMismatch(f"unknown ingredient name {name!r}") from None

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            names = [line.rstrip("\n") for line in fh]
        while names and names[-1] == "":
            names.pop()
        return cls(tuple(names))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name in self.names:
                fh.write(name + "\n")


@dataclass(frozen=True)
class RecipeRecord:
    """One recipe: id, embedding row index, and (ingredient, grams) items."""

    id: str
    emb: int
    items: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class Dataset:
    """Records plus their embedding matrix over a shared vocabulary."""

    vocabulary: Vocabulary
    records: tuple[RecipeRecord, ...]
    embeddings: np.ndarray
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    def embedding_of(self, record: RecipeRecord) -> np.ndarray:
        return self.embeddings[record.emb]

    def amount_vector(self, record: RecipeRecord, amount_constant: float = DEFAULT_AMOUNT_CONSTANT) -> np.ndarray:
        return relative_amounts(record.items, self.vocabulary.size, amount_constant)

    def detection_vector(self, record: RecipeRecord) -> np.ndarray:
        return detection_from_amounts(self.amount_vector(record))

    def with_embeddings(self, matrix: np.ndarray) -> "Dataset":
        """Same records over a replacement embedding matrix (e.g. projected)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[0] != self.embeddings.shape[0]:
            raise DimensionMismatch(
                f"replacement matrix has {matrix.shape[0]} rows, need {self.embeddings.shape[0]}"
            )
        return replace(self, embeddings=matrix)


def relative_amounts(items, size: int, amount_constant: float = DEFAULT_AMOUNT_CONSTANT) -> np.ndarray:
    """Spread the constant C over the listed ingredients proportionally to mass.

    v_i = C * m_i / M for listed ingredients (M = total mass), 0 elsewhere.
    """
    items = list(items)
    if not items:
        raise EmptyRecipe("recipe has no items")
    if amount_constant <= 0:
        raise ValueError(f"amount constant must be positive, got {amount_constant}")
    indices = [int(i) for i, _ in items]
    if len(set(indices)) != len(indices):
        raise DuplicateIngredient(f"duplicate ingredient index in items {indices}")
    v = np.zeros(size, dtype=np.float64)
    for idx, grams in items:
        idx = int(idx)
        if idx < 0 or idx >= size:
            raise VocabularyMismatch(f"ingredient index {idx} outside 0..{size - 1}")
        if grams <= 0:
            raise ValueError(f"grams must be positive, got {grams} at index {idx}")
        v[idx] = float(grams)
    total = v.sum()
    return v * (amount_constant / total)


def detection_from_amounts(v) -> np.ndarray:
    """Binary presence indicator 1{v > 0}."""
    v = np.asarray(v, dtype=np.float64)
    return (v > 0).astype(np.float64)


def _parse_recipe_line(obj, line_no, path, size, n_embeddings):
    try:
        rid = obj["id"]
        emb = obj["emb"]
        raw_items = obj["items"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing field {exc}", path=path, line=line_no) from None
    if not isinstance(rid, str):
        raise ParseError("recipe id must be a string", path=path, line=line_no)
    if not isinstance(emb, int) or isinstance(emb, bool):
        raise ParseError("emb must be an integer row index", path=path, line=line_no)
    if emb < 0 or emb >= n_embeddings:
        raise VocabularyMismatch(
            f"{path}:{line_no}: embedding row {emb} outside 0..{n_embeddings - 1}"
        )
    if not isinstance(raw_items, list) or not raw_items:
        raise EmptyRecipe(f"{path}:{line_no}: recipe {rid!r} has no items")
    items = []
    seen = set()
    for entry in raw_items:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ParseError(f"bad item entry {entry!r}", path=path, line=line_no)
        idx, grams = entry
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise ParseError(f"item index {idx!r} is not an integer", path=path, line=line_no)
        if idx < 0 or idx >= size:
            raise VocabularyMismatch(
                f"{path}:{line_no}: ingredient index {idx} outside 0..{size - 1}"
            )
        if idx in seen:
            raise DuplicateIngredient(f"{path}:{line_no}: index {idx} repeated in recipe {rid!r}")
        seen.add(idx)
        grams = float(grams)
        if not grams > 0 or not np.isfinite(grams):
            raise ParseError(f"grams must be positive and finite, got {grams}", path=path, line=line_no)
        items.append((idx, grams))
    return RecipeRecord(id=rid, emb=emb, items=tuple(items))


def load_dataset(recipes_path, embeddings_path, vocabulary_path, split: str = "train") -> Dataset:
    """Load and validate a recipes JSONL + embeddings + vocabulary triple."""
    vocabulary = Vocabulary.load(vocabulary_path)
    embeddings = read_matrix(embeddings_path)
    records = []
    with open(recipes_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=recipes_path, line=line_no) from None
            records.append(
                _parse_recipe_line(obj, line_no, recipes_path, vocabulary.size, embeddings.shape[0])
            )
    return Dataset(
        vocabulary=vocabulary,
        records=tuple(records),
        embeddings=embeddings,
        split=split,
    )


def save_dataset(dataset: Dataset, recipes_path, embeddings_path, vocabulary_path) -> None:
    """Canonical serialization: stable field order, compact separators."""
    dataset.vocabulary.save(vocabulary_path)
    write_matrix(embeddings_path, dataset.embeddings)
    save_recipes(dataset.records, recipes_path)


def save_recipes(records, recipes_path) -> None:
    with open(recipes_path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "id": rec.id,
                "emb": rec.emb,
                "items": [[idx, grams] for idx, grams in rec.items],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
