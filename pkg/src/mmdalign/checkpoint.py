"""Self-describing checkpoint files: one .npz holding a JSON metadata entry
(format version, model config, both vocabularies) plus every parameter
tensor under its stable name."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .corpus import Vocab
from .transformer import ModelParams, TransformerConfig, init_params

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, cfg: TransformerConfig,
                    src_vocab: Vocab, tgt_vocab: Vocab):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = params.named_parameters()
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "source_vocab": {"language": src_vocab.language, "words": src_vocab.words},
        "target_vocab": {"language": tgt_vocab.language, "words": tgt_vocab.words},
        "parameter_names": [name for name, _ in named],
    }
    arrays = {name: tensor.data for name, tensor in named}
    np.savez(path, **{_META_KEY: np.array(json.dumps(meta))}, **arrays)


def load_checkpoint(path):
    """Returns (params, config, source_vocab, target_vocab)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if _META_KEY not in archive:
            raise CheckpointError(f"{path}: missing metadata entry")
        meta = json.loads(str(archive[_META_KEY]))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version!r}"
            )
        cfg = TransformerConfig(**meta["config"])
        src_vocab = Vocab.from_content_words(
            meta["source_vocab"]["language"], meta["source_vocab"]["words"][4:])
        if src_vocab.words != meta["source_vocab"]["words"]:
            raise CheckpointError(f"{path}: unexpected reserved-token layout")
        tgt_vocab = Vocab.from_content_words(
            meta["target_vocab"]["language"], meta["target_vocab"]["words"][4:])
        params = init_params(cfg, len(src_vocab), len(tgt_vocab), seed=0,
                             src_language=src_vocab.language,
                             tgt_language=tgt_vocab.language)
        for name, tensor in params.named_parameters():
            if name not in archive:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            stored = archive[name]
            if stored.shape != tensor.data.shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {stored.shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = stored.astype(np.float64)
    return params, cfg, src_vocab, tgt_vocab
