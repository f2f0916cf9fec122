"""Encoder-decoder translation model with separate per-language embedding
tables and a label-smoothed KL translation loss.

The two embedding tables are deliberately untied (and the output projection
is its own matrix): the alignment machinery operates between two distinct
embedding spaces, so nothing here may share rows across languages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, BOS_ID, EOS_ID, PAD_ID

MASK_VALUE = -1e9  # added to attention scores pre-softmax; underflows to 0 weight


@dataclass
class TransformerConfig:
    d_model: int = 32
    n_heads: int = 2
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 64
    dropout: float = 0.0
    label_smoothing: float = 0.1
    max_position: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    # keys and values share the per-head width
    @property
    def d_v(self) -> int:
        return self.d_k


@dataclass
class EmbeddingTable:
    language: str
    weight: Tensor  # [vocab_size, d_model]

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    cross_attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor


@dataclass
class ModelParams:
    source_embedding: EmbeddingTable
    target_embedding: EmbeddingTable
    encoder_layers: list[EncoderLayerParams]
    decoder_layers: list[DecoderLayerParams]
    out_w: Tensor
    out_b: Tensor
    positional: np.ndarray = field(repr=False, default=None)

    def parameters(self) -> list[Tensor]:
        """All learnable tensors in a fixed, name-stable order."""
        out = [self.source_embedding.weight, self.target_embedding.weight]
        for layer in self.encoder_layers:
            a = layer.attn
            out += [a.w_q, a.w_k, a.w_v, a.w_o,
                    layer.ln1_gain, layer.ln1_bias,
                    layer.ff_w1, layer.ff_b1, layer.ff_w2, layer.ff_b2,
                    layer.ln2_gain, layer.ln2_bias]
        for layer in self.decoder_layers:
            s, c = layer.self_attn, layer.cross_attn
            out += [s.w_q, s.w_k, s.w_v, s.w_o, layer.ln1_gain, layer.ln1_bias,
                    c.w_q, c.w_k, c.w_v, c.w_o, layer.ln2_gain, layer.ln2_bias,
                    layer.ff_w1, layer.ff_b1, layer.ff_w2, layer.ff_b2,
                    layer.ln3_gain, layer.ln3_bias]
        out += [self.out_w, self.out_b]
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]


def _init_attention(rng, d_model, prefix) -> AttentionParams:
    return AttentionParams(
        w_q=ad.xavier_uniform(rng, (d_model, d_model), f"{prefix}.w_q"),
        w_k=ad.xavier_uniform(rng, (d_model, d_model), f"{prefix}.w_k"),
        w_v=ad.xavier_uniform(rng, (d_model, d_model), f"{prefix}.w_v"),
        w_o=ad.xavier_uniform(rng, (d_model, d_model), f"{prefix}.w_o"),
    )


def _init_ffn(rng, d_model, d_ff, prefix):
    return (
        ad.xavier_uniform(rng, (d_model, d_ff), f"{prefix}.ff_w1"),
        ad.zeros((d_ff,), f"{prefix}.ff_b1"),
        ad.xavier_uniform(rng, (d_ff, d_model), f"{prefix}.ff_w2"),
        ad.zeros((d_model,), f"{prefix}.ff_b2"),
    )


def init_params(cfg: TransformerConfig, src_vocab_size: int, tgt_vocab_size: int,
                seed: int, src_language: str = "source",
                tgt_language: str = "target") -> ModelParams:
    """Xavier-uniform weights, zero biases, unit layer-norm gains; the init
    order is fixed, so identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    src_table = EmbeddingTable(
        src_language, ad.xavier_uniform(rng, (src_vocab_size, d), "src_embed"))
    tgt_table = EmbeddingTable(
        tgt_language, ad.xavier_uniform(rng, (tgt_vocab_size, d), "tgt_embed"))

    enc_layers = []
    for i in range(cfg.n_encoder_layers):
        pre = f"enc{i}"
        w1, b1, w2, b2 = _init_ffn(rng, d, cfg.d_ff, pre)
        enc_layers.append(EncoderLayerParams(
            attn=_init_attention(rng, d, f"{pre}.attn"),
            ln1_gain=ad.ones((d,), f"{pre}.ln1_gain"),
            ln1_bias=ad.zeros((d,), f"{pre}.ln1_bias"),
            ff_w1=w1, ff_b1=b1, ff_w2=w2, ff_b2=b2,
            ln2_gain=ad.ones((d,), f"{pre}.ln2_gain"),
            ln2_bias=ad.zeros((d,), f"{pre}.ln2_bias"),
        ))

    dec_layers = []
    for i in range(cfg.n_decoder_layers):
        pre = f"dec{i}"
        w1, b1, w2, b2 = _init_ffn(rng, d, cfg.d_ff, pre)
        dec_layers.append(DecoderLayerParams(
            self_attn=_init_attention(rng, d, f"{pre}.self_attn"),
            ln1_gain=ad.ones((d,), f"{pre}.ln1_gain"),
            ln1_bias=ad.zeros((d,), f"{pre}.ln1_bias"),
            cross_attn=_init_attention(rng, d, f"{pre}.cross_attn"),
            ln2_gain=ad.ones((d,), f"{pre}.ln2_gain"),
            ln2_bias=ad.zeros((d,), f"{pre}.ln2_bias"),
            ff_w1=w1, ff_b1=b1, ff_w2=w2, ff_b2=b2,
            ln3_gain=ad.ones((d,), f"{pre}.ln3_gain"),
            ln3_bias=ad.zeros((d,), f"{pre}.ln3_bias"),
        ))

    return ModelParams(
        source_embedding=src_table,
        target_embedding=tgt_table,
        encoder_layers=enc_layers,
        decoder_layers=dec_layers,
        out_w=ad.xavier_uniform(rng, (d, tgt_vocab_size), "out_w"),
        out_b=ad.zeros((tgt_vocab_size,), "out_b"),
        positional=positional_encoding(cfg.max_position, cfg.d_model),
    )


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position matrix: PE[p, 2i] = sin(p / 10000^(2i/d)),
    PE[p, 2i+1] = cos of the same angle."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


def embed_lookup(table: EmbeddingTable, ids: np.ndarray) -> Tensor:
    """Raw row gather from the table (no scaling, no positions) — the form
    the alignment losses operate on."""
    return ad.gather(table.weight, np.asarray(ids, dtype=np.int64))


def embed_scaled(table: EmbeddingTable, ids: np.ndarray, d_model: int) -> Tensor:
    """Lookup scaled by sqrt(d_model), as consumed inside the model."""
    return embed_lookup(table, ids) * float(np.sqrt(d_model))


def pad_attention_mask(ids: np.ndarray) -> np.ndarray:
    """[B, 1, 1, L] additive mask: MASK_VALUE at pad key positions."""
    blocked = (ids == PAD_ID)
    return np.where(blocked, MASK_VALUE, 0.0)[:, None, None, :]


def causal_attention_mask(length: int) -> np.ndarray:
    """[1, 1, L, L] additive mask blocking future key positions."""
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(future, MASK_VALUE, 0.0)[None, None, :, :]


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """Scaled dot-product attention; returns (output, weights).

    Masked positions receive MASK_VALUE before the softmax, which drives
    their weight to exactly zero in double precision.
    """
    d_k = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = ad.softmax(scores, axis=-1)
    return weights @ v, weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dk = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, length, h * dk)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: AttentionParams,
                         n_heads: int, mask: np.ndarray | None = None):
    """Parallel heads over learned projections, merged and projected back to
    d_model; returns (output, weights[B, H, Lq, Lk])."""
    q = _split_heads(x_q @ params.w_q, n_heads)
    k = _split_heads(x_kv @ params.w_k, n_heads)
    v = _split_heads(x_kv @ params.w_v, n_heads)
    attended, weights = attention(q, k, v, mask)
    return _merge_heads(attended) @ params.w_o, weights


def _ffn(x: Tensor, layer) -> Tensor:
    return ad.relu(x @ layer.ff_w1 + layer.ff_b1) @ layer.ff_w2 + layer.ff_b2


def _sublayer(x: Tensor, sub_out: Tensor, gain: Tensor, bias: Tensor,
              rate: float, rng) -> Tensor:
    if rate > 0.0 and rng is not None:
        sub_out = ad.dropout(sub_out, rate, rng)
    return ad.layer_norm(x + sub_out, gain, bias)


def encode(src_ids: np.ndarray, params: ModelParams, cfg: TransformerConfig,
           train_mode: bool = False, rng=None) -> Tensor:
    """Encoder stack over padded source ids; returns [B, Ls, d_model]."""
    _, length = src_ids.shape
    if length > cfg.max_position:
        raise ValueError(f"sequence length {length} exceeds max_position {cfg.max_position}")
    rate = cfg.dropout if train_mode else 0.0
    mask = pad_attention_mask(src_ids)
    x = embed_scaled(params.source_embedding, src_ids, cfg.d_model) + Tensor(
        params.positional[:length])
    if rate > 0.0 and rng is not None:
        x = ad.dropout(x, rate, rng)
    for layer in params.encoder_layers:
        attended, _ = multi_head_attention(x, x, layer.attn, cfg.n_heads, mask)
        x = _sublayer(x, attended, layer.ln1_gain, layer.ln1_bias, rate, rng)
        x = _sublayer(x, _ffn(x, layer), layer.ln2_gain, layer.ln2_bias, rate, rng)
    return x


def decode(tgt_in_ids: np.ndarray, memory: Tensor, src_ids: np.ndarray,
           params: ModelParams, cfg: TransformerConfig,
           train_mode: bool = False, rng=None) -> Tensor:
    """Decoder stack (masked self-attention, encoder attention, feed-forward);
    returns [B, Lt, d_model]."""
    _, length = tgt_in_ids.shape
    if length > cfg.max_position:
        raise ValueError(f"sequence length {length} exceeds max_position {cfg.max_position}")
    rate = cfg.dropout if train_mode else 0.0
    self_mask = causal_attention_mask(length)
    cross_mask = pad_attention_mask(src_ids)
    x = embed_scaled(params.target_embedding, tgt_in_ids, cfg.d_model) + Tensor(
        params.positional[:length])
    if rate > 0.0 and rng is not None:
        x = ad.dropout(x, rate, rng)
    for layer in params.decoder_layers:
        attended, _ = multi_head_attention(x, x, layer.self_attn, cfg.n_heads, self_mask)
        x = _sublayer(x, attended, layer.ln1_gain, layer.ln1_bias, rate, rng)
        attended, _ = multi_head_attention(x, memory, layer.cross_attn, cfg.n_heads, cross_mask)
        x = _sublayer(x, attended, layer.ln2_gain, layer.ln2_bias, rate, rng)
        x = _sublayer(x, _ffn(x, layer), layer.ln3_gain, layer.ln3_bias, rate, rng)
    return x


def forward(batch: Batch, params: ModelParams, cfg: TransformerConfig,
            train_mode: bool = False, rng=None) -> Tensor:
    """Teacher-forced forward pass; logits [B, Lt-1, target_vocab]."""
    tgt_in = batch.target[:, :-1]
    memory = encode(batch.source, params, cfg, train_mode, rng)
    hidden = decode(tgt_in, memory, batch.source, params, cfg, train_mode, rng)
    return hidden @ params.out_w + params.out_b


def smoothed_targets(target_ids: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    """Smoothed label distributions: 1-eps on the true token, eps spread
    over all tokens except the true token and PAD (which gets zero mass)."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    if eps > 0.0 and vocab_size <= 2:
        raise ValueError("smoothing needs a vocabulary larger than 2")
    flat = target_ids.reshape(-1)
    n = flat.shape[0]
    if eps == 0.0:
        q = np.zeros((n, vocab_size))
    else:
        q = np.full((n, vocab_size), eps / (vocab_size - 2))
        q[:, PAD_ID] = 0.0
    q[np.arange(n), flat] = 1.0 - eps
    return q.reshape(*target_ids.shape, vocab_size)


def label_smoothed_loss(logits: Tensor, target_out: np.ndarray,
                        eps: float = 0.1) -> Tensor:
    """KL divergence from the smoothed target distribution to the predicted
    softmax, averaged over non-pad target positions."""
    vocab_size = logits.shape[-1]
    mask = target_out != PAD_ID
    n_tokens = int(mask.sum())
    if n_tokens == 0:
        raise ValueError("loss: no non-pad target positions in batch")
    q = smoothed_targets(target_out, vocab_size, eps)
    q = q * mask[..., None]
    log_p = ad.log_softmax(logits, axis=-1)
    cross = -ad.tensor_sum(log_p * Tensor(q))
    # constant entropy term of the target distribution, so the value is a
    # true KL divergence (zero at a perfect match)
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    return (cross + float(qlogq.sum())) * (1.0 / n_tokens)


def greedy_decode(params: ModelParams, cfg: TransformerConfig,
                  src_ids, max_len: int = 40) -> list[int]:
    """Greedy step-by-step decoding of a single encoded source sentence;
    returns the generated ids without BOS, stopping at EOS (excluded)."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    with ad.no_grad():
        memory = encode(src, params, cfg)
        generated = [BOS_ID]
        for _ in range(max_len):
            tgt = np.asarray(generated, dtype=np.int64)[None, :]
            hidden = decode(tgt, memory, src, params, cfg)
            logits = hidden @ params.out_w + params.out_b
            next_id = int(np.argmax(logits.data[0, -1]))
            if next_id == EOS_ID:
                break
            generated.append(next_id)
    return generated[1:]
