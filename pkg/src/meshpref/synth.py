"""Procedural preference data: primitive meshes degraded by a quality knob.

Lower quality means more vertex jitter, more deleted faces and more
reversed faces. The Likert-style score is ``0.5 + 4.5 q`` plus a per-seed
offset, so for a fixed kind and seed it never decreases with quality.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import primitives
from .errors import ConfigError, PopulationError
from .mesh_core import TriangleMesh, read_obj, save_obj

KINDS = ("sphere", "box", "torus", "cylinder")
PREFERRED_MIN = 4.0
DISPREFERRED_MAX = 3.5

JITTER = 0.05
DELETE = 0.20
FLIP = 0.10
SCORE_NOISE = 0.25


def label_for(score: float) -> str:
    if score >= PREFERRED_MIN:
        return "preferred"
    if score <= DISPREFERRED_MAX:
        return "dispreferred"
    return "excluded"


def base_mesh(kind: str) -> TriangleMesh:
    if kind == "sphere":
        return primitives.icosphere(2)
    if kind == "box":
        return primitives.box(4)
    if kind == "torus":
        return primitives.torus()
    if kind == "cylinder":
        return primitives.cylinder()
    raise ConfigError(f"unknown mesh kind {kind!r}; choose from {', '.join(KINDS)}")


def _kind_seed(kind: str, seed: int) -> np.random.SeedSequence:
    tag = int.from_bytes(hashlib.blake2b(kind.encode(), digest_size=4).digest(), "little")
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])


def gen_mesh(kind: str, quality: float, seed: int):
    """Degraded primitive and its score, deterministic in ``(kind, quality, seed)``."""
    if not 0.0 <= quality <= 1.0:
        raise ConfigError(f"quality must lie in [0, 1], got {quality}")
    mesh = base_mesh(kind)
    ss_noise, ss_geom = _kind_seed(kind, seed).spawn(2)
    score = 0.5 + 4.5 * quality + SCORE_NOISE * np.random.default_rng(ss_noise).uniform(-1.0, 1.0)
    score = float(min(5.0, max(0.0, score)))
    if quality >= 1.0:
        return mesh, score

    rng = np.random.default_rng(ss_geom)
    bad = 1.0 - quality
    verts = mesh.vertices.copy()
    faces = mesh.faces.copy()
    centre = verts.mean(axis=0)
    radius = float(np.linalg.norm(verts - centre, axis=1).max())
    verts += rng.uniform(-1.0, 1.0, size=verts.shape) * (bad * JITTER * radius)

    n_flip = int(round(bad * FLIP * len(faces)))
    flip = rng.choice(len(faces), size=n_flip, replace=False)
    faces[flip] = faces[flip][:, [0, 2, 1]]
    n_del = int(round(bad * DELETE * len(faces)))
    keep = np.ones(len(faces), dtype=bool)
    keep[rng.choice(len(faces), size=n_del, replace=False)] = False
    out, _ = TriangleMesh(verts, faces[keep]).compact()
    return out, score


def prompt_for(kind: str, quality: float) -> str:
    if quality >= 0.78:
        return f"a clean {kind}"
    if quality >= 0.62:
        return f"a slightly rough {kind}"
    if quality >= 0.3:
        return f"a damaged {kind}"
    return f"a badly damaged {kind} with holes"


@dataclass
class PrefItem:
    mesh: TriangleMesh
    prompt: str
    score: float
    label: str
    kind: str = ""
    quality: float = 0.0
    seed: int = 0


@dataclass
class PrefDataset:
    items: list
    manifest: dict = field(default_factory=dict)

    def counts(self) -> dict:
        out = {"preferred": 0, "dispreferred": 0, "excluded": 0}
        for it in self.items:
            out[it.label] += 1
        return out

    def labelled(self) -> list:
        return [it for it in self.items if it.label != "excluded"]


def _draw_quality(rng: np.random.Generator) -> float:
    # bimodal: clear good / clear bad modes plus an ambiguous middle band
    u = rng.uniform()
    if u < 0.45:
        return float(rng.uniform(0.78, 1.0))
    if u < 0.9:
        return float(rng.uniform(0.0, 0.62))
    return float(rng.uniform(0.62, 0.78))


def gen_dataset(n: int, seed: int) -> PrefDataset:
    if n < 4:
        raise ConfigError(f"need n >= 4, got {n}")
    rng = np.random.default_rng(seed)
    kinds = rng.integers(0, len(KINDS), size=n)
    qualities = [_draw_quality(rng) for _ in range(n)]
    item_seeds = rng.integers(0, 2**31 - 1, size=n)
    items = []
    for k, q, s in zip(kinds.tolist(), qualities, item_seeds.tolist()):
        kind = KINDS[k]
        mesh, score = gen_mesh(kind, q, s)
        items.append(PrefItem(mesh, prompt_for(kind, q), score, label_for(score), kind, q, s))
    ds = PrefDataset(items, manifest=_manifest(n, seed, items))
    c = ds.counts()
    if not c["preferred"] or not c["dispreferred"]:
        raise PopulationError(f"dataset of {n} items lacks a population ({c}); raise n")
    return ds


def _manifest(n, seed, items):
    return {
        "generator": "meshpref.synth",
        "n": n,
        "seed": seed,
        "items": [
            {
                "id": f"{i:05d}",
                "kind": it.kind,
                "quality": it.quality,
                "seed": it.seed,
                "prompt": it.prompt,
                "score": it.score,
                "label": it.label,
            }
            for i, it in enumerate(items)
        ],
    }


def regenerate(manifest: dict) -> PrefDataset:
    """Rebuild a dataset from its manifest's per-item kind, quality and seed."""
    items = []
    for rec in manifest["items"]:
        mesh, score = gen_mesh(rec["kind"], rec["quality"], rec["seed"])
        items.append(PrefItem(mesh, prompt_for(rec["kind"], rec["quality"]), score, label_for(score), rec["kind"], rec["quality"], rec["seed"]))
    return PrefDataset(items, manifest=manifest)


def save_dataset(ds: PrefDataset, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "items"), exist_ok=True)
    for rec, it in zip(ds.manifest["items"], ds.items):
        save_obj(it.mesh, os.path.join(out_dir, "items", rec["id"] + ".obj"))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(ds.manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(out_dir) -> PrefDataset:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    items = []
    for rec in manifest["items"]:
        mesh = read_obj(os.path.join(out_dir, "items", rec["id"] + ".obj"))
        items.append(PrefItem(mesh, rec["prompt"], float(rec["score"]), rec["label"], rec.get("kind", ""), rec.get("quality", 0.0), rec.get("seed", 0)))
    return PrefDataset(items, manifest=manifest)
