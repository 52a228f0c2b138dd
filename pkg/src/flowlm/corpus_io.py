"""Corpus persistence: a directory holding a JSON manifest plus binary shards.

Shard layout (all little-endian):

    magic    8 bytes  b"FLOWSHRD"
    version  uint32   currently 1
    count    uint32   number of utterance records
    then per record:
        n_frames   uint32
        attr_dim   uint32
        embed_dim  uint32
        speaker    uint16   (0xFFFF when unknown)
        tokens     n_frames  * uint16
        attribute  attr_dim  * float32
        embeddings n_frames * embed_dim * float32, row-major frames x dim

The manifest records the format version, the generating specs (grammar and
renderer parameters, both rebuildable from their seeds), seeds, counts and
the shard file list. Writing the same corpus twice produces identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .corpus import GrammarSpec, MinimalPairSet, RenderSpec, Utterance
from .errors import ContractViolation

MAGIC = b"FLOWSHRD"
FORMAT_VERSION = 1
_NO_SPEAKER = 0xFFFF


def grammar_to_dict(g: GrammarSpec) -> dict:
    return {
        "vocab_size": g.vocab_size,
        "lexicon": {str(k): list(v) for k, v in sorted(g.lexicon.items())},
        "word_classes": {k: list(v) for k, v in sorted(g.word_classes.items())},
        "templates": [list(t) for t in g.templates],
        "seed": g.seed,
        "p_edge": g.p_edge,
        "p_sep": g.p_sep,
    }


def grammar_from_dict(d: dict) -> GrammarSpec:
    return GrammarSpec(
        vocab_size=d["vocab_size"],
        lexicon={int(k): tuple(v) for k, v in d["lexicon"].items()},
        word_classes={k: tuple(v) for k, v in d["word_classes"].items()},
        templates=tuple(tuple(t) for t in d["templates"]),
        seed=d["seed"], p_edge=d["p_edge"], p_sep=d["p_sep"],
    )


def write_shard(path, utterances) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(utterances))
    for utt in utterances:
        toks = np.asarray(utt.tokens)
        if toks.max(initial=0) > 0xFFFE:
            raise ContractViolation("token id exceeds uint16 shard range")
        emb = np.ascontiguousarray(utt.embeddings, dtype="<f4")
        attr = np.ascontiguousarray(utt.attribute, dtype="<f4")
        speaker = utt.speaker if utt.speaker >= 0 else _NO_SPEAKER
        buf += struct.pack("<IIIH", len(toks), attr.shape[0], emb.shape[1], speaker)
        buf += toks.astype("<u2").tobytes()
        buf += attr.tobytes()
        buf += emb.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_shard(path) -> list:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractViolation(f"{path}: not a corpus shard (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ContractViolation(
            f"{path}: shard format version {version}, expected {FORMAT_VERSION}")
    off = 16
    out = []
    for _ in range(count):
        n, attr_dim, dim, speaker = struct.unpack_from("<IIIH", data, off)
        off += 14
        toks = np.frombuffer(data, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
        attr = np.frombuffer(data, dtype="<f4", count=attr_dim, offset=off).copy()
        off += 4 * attr_dim
        emb = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).copy()
        off += 4 * n * dim
        out.append(Utterance(toks, emb, attr,
                             speaker=-1 if speaker == _NO_SPEAKER else speaker))
    return out


def save_corpus(directory, utterances, grammar: GrammarSpec, render: RenderSpec,
                seed: int, shard_size: int = 1024, extra: dict | None = None) -> Path:
    """Write shards plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = []
    for si in range(0, max(len(utterances), 1), shard_size):
        chunk = utterances[si:si + shard_size]
        name = f"shard_{si // shard_size:04d}.bin"
        write_shard(directory / name, chunk)
        shards.append({"file": name, "count": len(chunk)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "corpus",
        "seed": seed,
        "n_utterances": len(utterances),
        "grammar": grammar_to_dict(grammar),
        "render": render.params(),
        "shards": shards,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def save_pairs(directory, pairs: MinimalPairSet, seed: int,
               extra: dict | None = None) -> Path:
    """Persist a minimal-pair set as positives/negatives shards."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_shard(directory / "positives.bin", [p for p, _ in pairs.pairs])
    write_shard(directory / "negatives.bin", [n for _, n in pairs.pairs])
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "minimal_pairs",
        "pair_kind": pairs.kind,
        "n_pairs": len(pairs.pairs),
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_pairs(directory) -> MinimalPairSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    pos = read_shard(directory / "positives.bin")
    neg = read_shard(directory / "negatives.bin")
    return MinimalPairSet(kind=manifest["pair_kind"], pairs=list(zip(pos, neg)))


def save_consistency(directory, pairs, seed: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_shard(directory / "consistent.bin", [c for c, _ in pairs])
    write_shard(directory / "inconsistent.bin", [i for _, i in pairs])
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "consistency_pairs",
        "n_pairs": len(pairs),
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_consistency(directory) -> list:
    directory = Path(directory)
    cons = read_shard(directory / "consistent.bin")
    incons = read_shard(directory / "inconsistent.bin")
    return list(zip(cons, incons))


def load_corpus(directory):
    """Returns (utterances, grammar, render, manifest)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise ContractViolation(
            f"manifest format version {manifest['format_version']}, "
            f"expected {FORMAT_VERSION}")
    utterances = []
    for shard in manifest["shards"]:
        utterances.extend(read_shard(directory / shard["file"]))
    grammar = grammar_from_dict(manifest["grammar"])
    render = RenderSpec.from_params(manifest["render"])
    return utterances, grammar, render, manifest
