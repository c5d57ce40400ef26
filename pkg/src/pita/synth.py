"""Desk-scale synthetic dataset generator.

Generates a vocabulary, ingredient word embeddings with planted
substitution-group structure, a curated verdict file that recovers the
planted partition exactly, and recipe splits whose detections and amounts
are deterministic functions of a latent dish code observed through noisy
embedding views.

Two constructions give the dataset teeth for loss/mode comparisons:

* Ambiguous dishes exist in two amount variants that swap a large mass
  between members of two far-apart groups, with a "bridge" ingredient
  whose word embedding sits equally close to both. Which variant a recipe
  uses is not encoded in its embedding, so amount-side hedging strategies
  differ measurably under a transport metric.
* A couple of dishes carry more ingredients than a fixed top-k cutoff can
  return, so rank-based thresholding truncates them while a detector need
  not.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RecipeRecord, Vocabulary, save_recipes, write_matrix
from .groups import save_groups
from .rng import stage_rng

BRIDGE_COS = 0.55  # just under the 0.6 proposal threshold
CENTROID_MAX_COS = 0.45
MEMBER_NOISE = 0.08
PROTO_MAX_COS = 0.5
AMBIGUOUS_FRACTION = 0.25
BIG_DISH_SIZE = 13


@dataclass(frozen=True)
class SynthSpec:
    n_ingredients: int = 50
    n_groups: int = 10
    n_recipes: int = 5000
    seed: int = 7
    noise: float = 0.1
    embedding_dim: int = 32
    amount_constant: float = 1000.0


def _unit(v):
    return v / np.linalg.norm(v)


def _sample_unit_with_rejection(rng, dim, existing, max_cos, max_tries=10000):
    for _ in range(max_tries):
        cand = _unit(rng.normal(size=dim))
        if all(abs(float(cand @ e)) <= max_cos for e in existing):
            return cand
    raise RuntimeError("could not place a sufficiently separated direction")


def _group_centroids(rng, n_groups, dim):
    """Two far-apart groups plus their angular bisector, then random rest."""
    theta = 2.0 * np.arccos(BRIDGE_COS)
    c_v = np.zeros(dim)
    c_v[0] = 1.0
    c_w = np.zeros(dim)
    c_w[0] = np.cos(theta)
    c_w[1] = np.sin(theta)
    c_u = _unit(c_v + c_w)
    centroids = [c_v, c_w, c_u]
    while len(centroids) < n_groups:
        centroids.append(
            _sample_unit_with_rejection(rng, dim, centroids, CENTROID_MAX_COS)
        )
    return np.stack(centroids)  # rows 0,1,2 are the far pair and the bridge


def _member_embeddings(rng, centroids, group_of):
    """Members hug their centroid; verified to stay on the right threshold side."""
    n = group_of.shape[0]
    dim = centroids.shape[1]
    em = np.zeros((n, dim))
    for i in range(n):
        for _ in range(1000):
            cand = _unit(centroids[group_of[i]] + MEMBER_NOISE * rng.normal(size=dim))
            if float(cand @ centroids[group_of[i]]) > 0.9:
                em[i] = cand
                break
        else:
            raise RuntimeError("member embedding rejection loop failed")
    # planted invariant: within-group similarity clears 0.6, strictly
    for g in range(centroids.shape[0]):
        members = np.flatnonzero(group_of == g)
        sub = em[members] @ em[members].T
        if members.size > 1 and sub[~np.eye(members.size, dtype=bool)].min() <= 0.62:
            raise RuntimeError("within-group similarity fell below the threshold margin")
    return em


def _dish_catalog(rng, spec, group_of):
    """Item sets and base amounts per dish, including ambiguous variants."""
    n_dishes = max(4, spec.n_ingredients // 4)
    n_amb = int(round(AMBIGUOUS_FRACTION * n_dishes)) if spec.n_groups >= 3 else 0
    n_big = 2 if spec.n_ingredients >= BIG_DISH_SIZE + 2 and n_dishes >= 6 else 0

    v_mem = int(np.flatnonzero(group_of == 0)[0])
    w_mem = int(np.flatnonzero(group_of == 1)[0])
    u_mem = int(np.flatnonzero(group_of == 2)[0])

    kinds = ["ambiguous"] * n_amb + ["big"] * n_big
    kinds += ["normal"] * (n_dishes - len(kinds))

    sizes = []
    for kind in kinds:
        if kind == "ambiguous":
            sizes.append(5)
        elif kind == "big":
            sizes.append(BIG_DISH_SIZE)
        else:
            sizes.append(int(rng.integers(4, 9)))

    # deal every ingredient somewhere first, then top dishes up to size
    items = [[] for _ in range(n_dishes)]
    for d, kind in enumerate(kinds):
        if kind == "ambiguous":
            items[d] = [v_mem, w_mem, u_mem]
    pool = [i for i in rng.permutation(spec.n_ingredients).tolist() if i not in (v_mem, w_mem, u_mem)]
    d = 0
    while pool:
        for step in range(n_dishes):
            dd = (d + step) % n_dishes
            if len(items[dd]) < sizes[dd]:
                items[dd].append(pool.pop())
                d = (dd + 1) % n_dishes
                break
        else:
            # every dish is full; leftovers stretch the biggest one
            items[int(np.argmax(sizes))].append(pool.pop())
    for d in range(n_dishes):
        while len(items[d]) < sizes[d]:
            cand = int(rng.integers(spec.n_ingredients))
            if cand not in items[d]:
                items[d].append(cand)

    dishes = []
    for d, kind in enumerate(kinds):
        idx = items[d]
        if kind == "ambiguous":
            fillers = [k for k in idx if k not in (v_mem, w_mem, u_mem)]
            shares = rng.dirichlet(np.ones(len(fillers))) * 250.0
            base = {v_mem: 650.0, w_mem: 50.0, u_mem: 50.0}
            base.update({k: max(20.0, s) for k, s in zip(fillers, shares)})
            alt = dict(base)
            alt[v_mem], alt[w_mem] = base[w_mem], base[v_mem]
            dishes.append({"kind": kind, "variants": [base, alt]})
        else:
            dominant = idx[0]
            rest = idx[1:]
            dom_mass = float(rng.uniform(500.0, 700.0))
            shares = rng.dirichlet(np.ones(len(rest))) * (1000.0 - dom_mass)
            base = {dominant: dom_mass}
            base.update({k: max(20.0, s) for k, s in zip(rest, shares)})
            dishes.append({"kind": kind, "variants": [base]})
    return dishes


def generate(out_dir, spec: SynthSpec = SynthSpec()) -> dict:
    """Write the full synthetic dataset into out_dir; returns a summary."""
    if spec.n_groups < 1 or spec.n_ingredients < spec.n_groups:
        raise ValueError("need n_ingredients >= n_groups >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = stage_rng(spec.seed, "synth")

    vocab = Vocabulary(tuple(f"ing_{i:03d}" for i in range(spec.n_ingredients)))
    vocab.save(out / "vocab.txt")

    # contiguous near-equal groups over the index space
    bounds = np.linspace(0, spec.n_ingredients, spec.n_groups + 1).astype(int)
    group_of = np.zeros(spec.n_ingredients, dtype=np.int64)
    partition = []
    for g in range(spec.n_groups):
        members = list(range(bounds[g], bounds[g + 1]))
        partition.append(members)
        group_of[members] = g

    word_dim = max(10, spec.n_groups)
    centroids = _group_centroids(rng, spec.n_groups, word_dim)
    em = _member_embeddings(rng, centroids, group_of)
    write_matrix(out / "ingredient_embeddings.bin", em)
    save_groups(partition, out / "groups_true.json")

    # curated verdicts: approve within-group proposals, reject the rest
    cos = em @ em.T
    with open(out / "verdicts.tsv", "w", encoding="utf-8") as fh:
        for i in range(spec.n_ingredients):
            for j in range(i + 1, spec.n_ingredients):
                if cos[i, j] > 0.6:
                    verdict = "approve" if group_of[i] == group_of[j] else "reject"
                    fh.write(f"{vocab.names[i]}\t{vocab.names[j]}\t{verdict}\n")

    dishes = _dish_catalog(rng, spec, group_of)
    protos = []
    for _ in range(len(dishes)):
        protos.append(
            _sample_unit_with_rejection(rng, spec.embedding_dim, protos, PROTO_MAX_COS)
        )
    protos = np.stack(protos)

    records = []
    image_feats = np.zeros((spec.n_recipes, spec.embedding_dim))
    text_feats = np.zeros((spec.n_recipes, spec.embedding_dim))
    for r in range(spec.n_recipes):
        d = int(rng.integers(len(dishes)))
        dish = dishes[d]
        variant = dish["variants"][int(rng.integers(len(dish["variants"])))]
        factors = np.exp(spec.noise * rng.normal(size=len(variant)))
        items = tuple(
            (k, float(mass * f)) for (k, mass), f in zip(sorted(variant.items()), factors)
        )
        base = protos[d]
        image_feats[r] = base + spec.noise * rng.normal(size=spec.embedding_dim)
        text_feats[r] = base + spec.noise * rng.normal(size=spec.embedding_dim)
        records.append(RecipeRecord(id=f"r{r:06d}", emb=r, items=items))

    order = rng.permutation(spec.n_recipes)
    n_train = int(0.8 * spec.n_recipes)
    n_val = int(0.1 * spec.n_recipes)
    split_ids = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    for split, ids in split_ids.items():
        rows = []
        for new_emb, r in enumerate(ids):
            rec = records[r]
            rows.append(RecipeRecord(id=rec.id, emb=new_emb, items=rec.items))
        save_recipes(rows, out / f"recipes_{split}.jsonl")
        write_matrix(out / f"embeddings_{split}.bin", image_feats[ids])
        write_matrix(out / f"text_features_{split}.bin", text_feats[ids])

    return {
        "ingredients": spec.n_ingredients,
        "groups": spec.n_groups,
        "recipes": spec.n_recipes,
        "dishes": len(dishes),
        "splits": {k: int(len(v)) for k, v in split_ids.items()},
    }
