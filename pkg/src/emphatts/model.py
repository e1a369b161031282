"""The acoustic network: a phoneme encoder and frame decoder built from
emphasis-aware transformer blocks (self-attention, conditional cross attention
with an additive emphasis boost, conditional layer norm, conv feed-forward),
with the variance adapter between them.

Core functions operate on batched [B, T, d] tensors; the public per-utterance
functions wrap a batch of one. Padded positions are re-zeroed after every
sublayer so batched and single-utterance forwards agree bitwise on valid rows.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ParameterRegistry, Tensor, load_tensor, save_tensor
from .prosody import (
    EmphasisMask,
    NormalizationStats,
    span_to_mask,
)

MODEL_SCHEMA_VERSION = 1

PAD_LOGIT = -1e9


class ModelError(ValueError):
    """Raised for invalid configs, inputs, or checkpoint contents."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    conv_kernel: int = 9
    conv_hidden: int = 128
    n_mel: int = 20
    vocab_size: int = 32
    n_emotions: int = 5
    n_speakers: int = 4
    ea_strength: float = 0.2
    dropout: float = 0.1
    condition_tokens: int = 2  # emotion token, then speaker token; 1 = emotion only
    ea_on_mha: bool = False
    predictor_kernel: int = 3
    predictor_hidden: int = 64
    max_phonemes: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.ea_strength < 0:
            raise ModelError("ea_strength must be >= 0")
        if self.condition_tokens not in (1, 2):
            raise ModelError("condition_tokens must be 1 or 2")
        if self.conv_kernel % 2 == 0 or self.predictor_kernel % 2 == 0:
            raise ModelError("conv kernel widths must be odd")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    """Standard sin/cos positional table, [length, d] float32."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float32)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _init_linear(reg, prefix, d_in, d_out, rng, bias=True):
    reg.add(f"{prefix}.w", (rng.normal(size=(d_in, d_out)) / math.sqrt(d_in)).astype(np.float32))
    if bias:
        reg.add(f"{prefix}.b", np.zeros(d_out, dtype=np.float32))


def _init_conv(reg, prefix, k, c_in, c_out, rng):
    scale = math.sqrt(k * c_in)
    reg.add(f"{prefix}.k", (rng.normal(size=(k, c_in, c_out)) / scale).astype(np.float32))
    reg.add(f"{prefix}.b", np.zeros(c_out, dtype=np.float32))


def init_mha_params(reg, prefix, config, rng):
    d = config.d_model
    for name in ("wq", "wk", "wv", "wo"):
        reg.add(f"{prefix}.{name}", (rng.normal(size=(d, d)) / math.sqrt(d)).astype(np.float32))
    for name in ("bq", "bk", "bv", "bo"):
        reg.add(f"{prefix}.{name}", np.zeros(d, dtype=np.float32))


def init_cca_params(reg, prefix, config, rng):
    # query/key/value maps are bias-free projections; only the output is affine
    d = config.d_model
    for name in ("wq", "wk", "wv", "wo"):
        reg.add(f"{prefix}.{name}", (rng.normal(size=(d, d)) / math.sqrt(d)).astype(np.float32))
    reg.add(f"{prefix}.bo", np.zeros(d, dtype=np.float32))


def init_cln_params(reg, prefix, config, rng):
    # starts as plain layer norm: gamma(c) = 1, beta(c) = 0
    d = config.d_model
    reg.add(f"{prefix}.gw", np.zeros((d, d), dtype=np.float32))
    reg.add(f"{prefix}.gb", np.ones(d, dtype=np.float32))
    reg.add(f"{prefix}.bw", np.zeros((d, d), dtype=np.float32))
    reg.add(f"{prefix}.bb", np.zeros(d, dtype=np.float32))


def init_ffn_params(reg, prefix, config, rng):
    # wide odd-kernel conv then a pointwise conv back to d_model
    _init_conv(reg, f"{prefix}.conv1", config.conv_kernel, config.d_model, config.conv_hidden, rng)
    _init_conv(reg, f"{prefix}.conv2", 1, config.conv_hidden, config.d_model, rng)


def init_epe_block_params(reg, prefix, config, rng):
    init_mha_params(reg, f"{prefix}.mha", config, rng)
    init_cln_params(reg, f"{prefix}.cln1", config, rng)
    init_cca_params(reg, f"{prefix}.cca", config, rng)
    init_cln_params(reg, f"{prefix}.cln2", config, rng)
    init_ffn_params(reg, f"{prefix}.ffn", config, rng)
    init_cln_params(reg, f"{prefix}.cln3", config, rng)


def init_predictor_params(reg, prefix, config, rng, extra_in=0):
    k = config.predictor_kernel
    hid = config.predictor_hidden
    _init_conv(reg, f"{prefix}.conv1", k, config.d_model + extra_in, hid, rng)
    _init_conv(reg, f"{prefix}.conv2", k, hid, hid, rng)
    _init_linear(reg, f"{prefix}.out", hid, 1, rng)


PREDICTORS = ("pitch", "energy", "dur", "pitch_var", "dur_var")


def init_params(config: ModelConfig, seed: int = 0) -> ParameterRegistry:
    """Deterministic parameter registry for the full network."""
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    d = config.d_model
    reg.add("embed.phoneme", (rng.normal(size=(config.vocab_size, d)) * 0.1).astype(np.float32))
    reg.add("embed.emotion", (rng.normal(size=(config.n_emotions, d)) * 0.5).astype(np.float32))
    reg.add("embed.speaker", (rng.normal(size=(config.n_speakers, d)) * 0.5).astype(np.float32))
    for i in range(config.n_encoder_blocks):
        init_epe_block_params(reg, f"enc.{i}", config, rng)
    for name in PREDICTORS:
        extra = 1 if name.endswith("_var") else 0  # variance heads also see the mask channel
        init_predictor_params(reg, f"pred.{name}", config, rng, extra_in=extra)
    _init_linear(reg, "feedback.pitch", 1, d, rng)
    _init_linear(reg, "feedback.energy", 1, d, rng)
    for i in range(config.n_decoder_blocks):
        init_epe_block_params(reg, f"dec.{i}", config, rng)
    _init_linear(reg, "mel", d, config.n_mel, rng)
    return reg


# ---------------------------------------------------------------------------
# batched cores
# ---------------------------------------------------------------------------


def _mask3(mask2):
    """[B, T] 0/1 ndarray -> constant [B, T, 1] Tensor, or None."""
    if mask2 is None:
        return None
    m = np.asarray(mask2, dtype=np.float32)
    return Tensor(m[:, :, None])


def _remask(h, seq_mask3):
    return h if seq_mask3 is None else nm.mul(h, seq_mask3)


def condition_tokens_core(params, config, emotion_ids, speaker_ids) -> Tensor:
    """[B] emotion/speaker ids -> [B, n_cond, d] condition tokens
    (emotion first)."""
    emotion_ids = np.asarray(emotion_ids)
    speaker_ids = np.asarray(speaker_ids)
    b = emotion_ids.shape[0]
    em = nm.reshape(nm.embedding(params["embed.emotion"], emotion_ids), (b, 1, config.d_model))
    if config.condition_tokens == 1:
        return em
    sp = nm.reshape(nm.embedding(params["embed.speaker"], speaker_ids), (b, 1, config.d_model))
    return nm.concat([em, sp], axis=-2)


def embed_core(params, config, ids, seq_mask=None) -> Tensor:
    """[B, T] padded phoneme ids -> [B, T, d] embeddings with positions."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ModelError(f"expected [B, T] ids, got shape {ids.shape}")
    if ids.shape[1] < 1:
        raise ModelError("cannot embed an empty phoneme sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ModelError(
            f"phoneme id out of vocabulary [0, {config.vocab_size})"
        )
    e = nm.embedding(params["embed.phoneme"], ids)
    h = nm.add(nm.mul(e, math.sqrt(config.d_model)), Tensor(sinusoidal_encoding(ids.shape[1], config.d_model)))
    return _remask(h, _mask3(seq_mask))


def mha_core(h, params, prefix, config, attn_bias=None, row_boost=None, collect=None) -> Tensor:
    """Multi-head self-attention with residual. attn_bias: additive constant
    on the key axis ([B,1,1,T]); row_boost: optional post-softmax constant."""
    b, t, d = h.shape
    heads = config.n_heads
    dh = d // heads

    def split(x):
        return nm.swap_axes(nm.reshape(x, (b, t, heads, dh)), 1, 2)

    q = split(nm.linear(h, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split(nm.linear(h, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = split(nm.linear(h, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    logits = nm.mul(nm.matmul(q, nm.transpose_last(k)), 1.0 / math.sqrt(dh))
    if attn_bias is not None:
        logits = nm.add(logits, Tensor(attn_bias))
    w = nm.softmax(logits, axis=-1)
    if collect is not None:
        collect[f"{prefix}.weights"] = w.data.copy()
    if row_boost is not None:
        w = nm.add(w, Tensor(row_boost))
    ctx = nm.reshape(nm.swap_axes(nm.matmul(w, v), 1, 2), (b, t, d))
    out = nm.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return nm.add(out, h)


def emphasis_adapter_core(w, emph_mask, strength: float):
    """w: [B, T, n] post-softmax weights; adds `strength` to every key column
    of rows inside the span. No renormalization afterwards."""
    if strength == 0.0 or emph_mask is None:
        return w
    delta = strength * np.asarray(emph_mask, dtype=np.float32)[:, :, None]
    return nm.add(w, Tensor(np.broadcast_to(delta, w.shape).copy()))


def cca_core(h, c, params, prefix, emph_mask, strength, collect=None) -> Tensor:
    """Cross attention from sequence positions to condition tokens, with the
    emphasis boost applied to the post-softmax weights, plus residual."""
    d = h.shape[-1]
    q = nm.matmul(h, params[f"{prefix}.wq"])
    k = nm.matmul(c, params[f"{prefix}.wk"])
    v = nm.matmul(c, params[f"{prefix}.wv"])
    logits = nm.mul(nm.matmul(q, nm.transpose_last(k)), 1.0 / math.sqrt(d))
    w = nm.softmax(logits, axis=-1)
    if collect is not None:
        collect[f"{prefix}.weights"] = w.data.copy()
    w = emphasis_adapter_core(w, emph_mask, strength)
    if collect is not None:
        collect[f"{prefix}.weights_adjusted"] = w.data.copy()
    ctx = nm.matmul(w, v)
    out = nm.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return nm.add(out, h)


def cln_core(x, c, params, prefix) -> Tensor:
    """Layer norm whose scale and shift are linear maps of the summed
    condition tokens."""
    b, _, d = x.shape
    xhat = nm.layer_norm(x, eps=1e-5)
    csum = nm.tsum(c, axis=-2)  # [B, d]
    gamma = nm.reshape(nm.linear(csum, params[f"{prefix}.gw"], params[f"{prefix}.gb"]), (b, 1, d))
    beta = nm.reshape(nm.linear(csum, params[f"{prefix}.bw"], params[f"{prefix}.bb"]), (b, 1, d))
    return nm.add(nm.mul(xhat, gamma), beta)


def ffn_core(x, params, prefix, config, rng=None, training=False) -> Tensor:
    y = nm.conv1d(x, params[f"{prefix}.conv1.k"], params[f"{prefix}.conv1.b"])
    y = nm.relu(y)
    y = nm.dropout(y, config.dropout, rng, training)
    y = nm.conv1d(y, params[f"{prefix}.conv2.k"], params[f"{prefix}.conv2.b"])
    y = nm.dropout(y, config.dropout, rng, training)
    return nm.add(y, x)


def epe_block_core(
    h,
    c,
    emph_mask,
    params,
    prefix,
    config,
    strength,
    seq_mask=None,
    attn_bias=None,
    rng=None,
    training=False,
    collect=None,
) -> Tensor:
    """One block: MHA -> CLN -> CCA+EA -> CLN -> conv FFN -> CLN, all with
    residuals inside the sublayers. Padded rows are re-zeroed throughout."""
    seq_mask3 = _mask3(seq_mask)
    row_boost = None
    if config.ea_on_mha and strength > 0.0 and emph_mask is not None:
        row_boost = strength * np.asarray(emph_mask, dtype=np.float32)[:, None, :, None]
    h = _remask(mha_core(h, params, f"{prefix}.mha", config, attn_bias, row_boost, collect), seq_mask3)
    h = _remask(cln_core(h, c, params, f"{prefix}.cln1"), seq_mask3)
    h = _remask(cca_core(h, c, params, f"{prefix}.cca", emph_mask, strength, collect), seq_mask3)
    h = _remask(cln_core(h, c, params, f"{prefix}.cln2"), seq_mask3)
    if collect is not None:
        collect[f"{prefix}.pre_ffn"] = h.data.copy()
    h = _remask(ffn_core(h, params, f"{prefix}.ffn", config, rng, training), seq_mask3)
    h = _remask(cln_core(h, c, params, f"{prefix}.cln3"), seq_mask3)
    return h


def predictor_core(x, params, prefix, config, rng=None, training=False) -> Tensor:
    """conv -> relu -> layer norm -> dropout, twice, then a linear head.
    Returns [B, T]."""
    b, t, _ = x.shape
    y = nm.conv1d(x, params[f"{prefix}.conv1.k"], params[f"{prefix}.conv1.b"])
    y = nm.dropout(nm.layer_norm(nm.relu(y)), config.dropout, rng, training)
    y = nm.conv1d(y, params[f"{prefix}.conv2.k"], params[f"{prefix}.conv2.b"])
    y = nm.dropout(nm.layer_norm(nm.relu(y)), config.dropout, rng, training)
    y = nm.linear(y, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return nm.reshape(y, (b, t))


def build_frame_index(durations, seq_mask=None):
    """Per-batch frame-to-phoneme index from integer durations.

    durations: [B, T] ints (>= 1 at valid positions). Returns (idx [B, F],
    frame_valid [B, F]) where F is the longest frame count in the batch.
    """
    durations = np.asarray(durations, dtype=np.int64)
    if seq_mask is not None:
        durations = durations * np.asarray(seq_mask, dtype=np.int64)
    b, t = durations.shape
    lengths = durations.sum(axis=1)
    f = int(lengths.max())
    idx = np.zeros((b, f), dtype=np.int64)
    valid = np.zeros((b, f), dtype=np.float32)
    for i in range(b):
        reps = np.repeat(np.arange(t), durations[i])
        idx[i, : len(reps)] = reps
        valid[i, : len(reps)] = 1.0
    return idx, valid


@dataclass
class VarianceAdapterOutput:
    """Predictions of the variance adapter (training: batched [B, T])."""

    pitch_pred: Tensor
    energy_pred: Tensor
    dur_pred: Tensor
    pitch_var_pred: Tensor
    dur_var_pred: Tensor
    effective_pitch: Tensor
    effective_dur: Tensor
    frame_hidden: Tensor
    durations_used: np.ndarray
    frame_index: np.ndarray
    frame_valid: np.ndarray
    frame_emph_mask: np.ndarray


def variance_adapter_core(
    h,
    params,
    config,
    stats: NormalizationStats,
    emph_mask,
    seq_mask=None,
    teacher_durations=None,
    emphasis_scale: float = 1.0,
    rng=None,
    training=False,
) -> VarianceAdapterOutput:
    """Five predictors over the encoder output plus length regulation.

    The variance heads consume the hidden sequence concatenated with the
    emphasis mask channel and are multiplied by the mask, so their tracks are
    exactly zero outside the span. Effective pitch is fed back into the hidden
    sequence; teacher durations drive length regulation when given, otherwise
    rounded effective durations (clamped to >= 1) do.
    """
    b, t, d = h.shape
    emph = np.zeros((b, t), dtype=np.float32) if emph_mask is None else np.asarray(emph_mask, dtype=np.float32)
    mask_t = Tensor(emph)
    pitch_pred = predictor_core(h, params, "pred.pitch", config, rng, training)
    energy_pred = predictor_core(h, params, "pred.energy", config, rng, training)
    dur_pred = nm.softplus(predictor_core(h, params, "pred.dur", config, rng, training))
    h_masked_in = nm.concat([h, Tensor(emph[:, :, None])], axis=-1)
    pitch_var = nm.mul(predictor_core(h_masked_in, params, "pred.pitch_var", config, rng, training), mask_t)
    dur_var = nm.mul(predictor_core(h_masked_in, params, "pred.dur_var", config, rng, training), mask_t)

    effective_pitch = nm.add(pitch_pred, nm.mul(pitch_var, float(emphasis_scale)))
    effective_dur = nm.add(dur_pred, nm.mul(dur_var, float(emphasis_scale) * stats.dur_unit))

    pitch_in = nm.reshape(effective_pitch, (b, t, 1))
    energy_in = nm.reshape(energy_pred, (b, t, 1))
    h2 = nm.add(
        h,
        nm.add(
            nm.linear(pitch_in, params["feedback.pitch.w"], params["feedback.pitch.b"]),
            nm.linear(energy_in, params["feedback.energy.w"], params["feedback.energy.b"]),
        ),
    )
    if teacher_durations is not None:
        durations_used = np.asarray(teacher_durations, dtype=np.int64)
        if durations_used.shape != (b, t):
            raise ModelError(
                f"teacher durations shape {durations_used.shape} does not match hidden {h.shape}"
            )
    else:
        durations_used = np.maximum(1, np.rint(effective_dur.data)).astype(np.int64)
    idx, frame_valid = build_frame_index(durations_used, seq_mask)
    frame_h = nm.mul(nm.gather_time(h2, idx), Tensor(frame_valid[:, :, None]))
    frame_emph = emph[np.arange(b)[:, None], idx] * frame_valid
    return VarianceAdapterOutput(
        pitch_pred=pitch_pred,
        energy_pred=energy_pred,
        dur_pred=dur_pred,
        pitch_var_pred=pitch_var,
        dur_var_pred=dur_var,
        effective_pitch=effective_pitch,
        effective_dur=effective_dur,
        frame_hidden=frame_h,
        durations_used=durations_used,
        frame_index=idx,
        frame_valid=frame_valid,
        frame_emph_mask=frame_emph,
    )


@dataclass
class ForwardResult:
    adapter: VarianceAdapterOutput
    mel: Tensor


def forward_batch(
    params,
    config,
    stats,
    ids,
    emotion_ids,
    speaker_ids,
    emph_mask=None,
    seq_mask=None,
    teacher_durations=None,
    emphasis_scale: float = 1.0,
    ea_strength=None,
    rng=None,
    training=False,
    collect=None,
) -> ForwardResult:
    """Whole-network forward pass on a padded batch."""
    strength = config.ea_strength if ea_strength is None else float(ea_strength)
    h = embed_core(params, config, ids, seq_mask)
    c = condition_tokens_core(params, config, emotion_ids, speaker_ids)
    attn_bias = None
    if seq_mask is not None:
        attn_bias = (PAD_LOGIT * (1.0 - np.asarray(seq_mask, dtype=np.float32)))[:, None, None, :]
    for i in range(config.n_encoder_blocks):
        h = epe_block_core(
            h, c, emph_mask, params, f"enc.{i}", config, strength,
            seq_mask=seq_mask, attn_bias=attn_bias, rng=rng, training=training, collect=collect,
        )
    adapter = variance_adapter_core(
        h, params, config, stats, emph_mask, seq_mask, teacher_durations,
        emphasis_scale, rng, training,
    )
    frame_valid = adapter.frame_valid
    f = frame_valid.shape[1]
    dec = nm.add(adapter.frame_hidden, Tensor(sinusoidal_encoding(f, config.d_model)))
    dec = _remask(dec, _mask3(frame_valid))
    frame_bias = (PAD_LOGIT * (1.0 - frame_valid))[:, None, None, :]
    for i in range(config.n_decoder_blocks):
        dec = epe_block_core(
            dec, c, adapter.frame_emph_mask, params, f"dec.{i}", config, strength,
            seq_mask=frame_valid, attn_bias=frame_bias, rng=rng, training=training, collect=collect,
        )
    mel = nm.linear(dec, params["mel.w"], params["mel.b"])
    return ForwardResult(adapter=adapter, mel=mel)


# ---------------------------------------------------------------------------
# per-utterance public surface
# ---------------------------------------------------------------------------


def _one(h):
    """[T, d] -> [1, T, d]."""
    return nm.reshape(h, (1, *h.shape))


def _un(h):
    return nm.reshape(h, h.shape[1:])


def _mask_row(mask):
    """EmphasisMask | array [T] | None -> [1, T] ndarray or None."""
    if mask is None:
        return None
    values = mask.values if isinstance(mask, EmphasisMask) else np.asarray(mask)
    return np.asarray(values, dtype=np.float32)[None, :]


def embed_phonemes(params, config, ids) -> Tensor:
    """Phoneme ids -> [T, d] hidden sequence (embedding * sqrt(d) + positions)."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ModelError("embed_phonemes expects a flat id sequence")
    if ids.size == 0:
        raise ModelError("cannot embed an empty phoneme sequence")
    return _un(embed_core(params, config, ids[None, :]))


def condition_tokens(params, config, emotion: int, speaker: int) -> Tensor:
    """Emotion/speaker ids -> [n_cond, d] condition token matrix."""
    return _un(condition_tokens_core(params, config, [emotion], [speaker]))


def mha_forward(h, params, prefix, config, collect=None) -> Tensor:
    return _un(mha_core(_one(h), params, prefix, config, collect=collect))


@dataclass
class AttentionWeights:
    """Post-softmax cross-attention weights and the additive emphasis delta."""

    w: Tensor
    delta: np.ndarray


def emphasis_adapter_apply(w, mask, strength: float) -> AttentionWeights:
    """w_adjusted = w + strength * mask, broadcast over every key column of
    in-span rows; out-of-span rows pass through bitwise unchanged."""
    if strength < 0:
        raise ModelError("emphasis strength must be >= 0")
    w = nm.as_tensor(w)
    values = mask.values if isinstance(mask, EmphasisMask) else np.asarray(mask)
    if values.shape[0] != w.shape[-2]:
        raise ModelError(
            f"mask length {values.shape[0]} does not match {w.shape[-2]} attention rows"
        )
    delta = np.broadcast_to(
        (strength * np.asarray(values, dtype=np.float32))[:, None], w.shape
    ).copy()
    if strength == 0.0:
        return AttentionWeights(w=w, delta=np.zeros_like(w.data))
    adjusted = _un(emphasis_adapter_core(_one(w), values[None, :], strength))
    return AttentionWeights(w=adjusted, delta=delta)


def cca_forward(h, c, params, prefix, mask, strength, collect=None) -> Tensor:
    """Per-utterance conditional cross attention with emphasis boost."""
    mask_row = _mask_row(mask)
    if mask_row is not None and mask_row.shape[1] != h.shape[0]:
        raise ModelError(
            f"mask length {mask_row.shape[1]} does not match sequence length {h.shape[0]}"
        )
    return _un(cca_core(_one(h), _one(c), params, prefix, mask_row, strength, collect=collect))


def cln_forward(x, c, params, prefix) -> Tensor:
    return _un(cln_core(_one(x), _one(c), params, prefix))


def epe_block_forward(
    h, c, mask, params, prefix, config, strength=None, rng=None, training=False, collect=None
) -> Tensor:
    strength = config.ea_strength if strength is None else strength
    return _un(
        epe_block_core(
            _one(h), _one(c), _mask_row(mask), params, prefix, config, strength,
            rng=rng, training=training, collect=collect,
        )
    )


def length_regulate(h, durations) -> Tensor:
    """Repeat row i of [T, d] `durations[i]` times (frame-level upsampling)."""
    return nm.repeat_rows(h, durations)


def variance_adapter_forward(
    h, params, config, stats, mask=None, teacher_durations=None,
    emphasis_scale=1.0, rng=None, training=False,
) -> VarianceAdapterOutput:
    """Per-utterance variance adapter; tensors in the result are unbatched."""
    teacher = None if teacher_durations is None else np.asarray(teacher_durations)[None, :]
    out = variance_adapter_core(
        _one(h), params, config, stats, _mask_row(mask), None, teacher,
        emphasis_scale, rng, training,
    )
    return VarianceAdapterOutput(
        pitch_pred=_un(out.pitch_pred),
        energy_pred=_un(out.energy_pred),
        dur_pred=_un(out.dur_pred),
        pitch_var_pred=_un(out.pitch_var_pred),
        dur_var_pred=_un(out.dur_var_pred),
        effective_pitch=_un(out.effective_pitch),
        effective_dur=_un(out.effective_dur),
        frame_hidden=_un(out.frame_hidden),
        durations_used=out.durations_used[0],
        frame_index=out.frame_index[0],
        frame_valid=out.frame_valid[0],
        frame_emph_mask=out.frame_emph_mask[0],
    )


@dataclass
class SynthesisResult:
    mel: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    durations: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def synthesize(
    params,
    config,
    stats,
    phonemes,
    emotion: int,
    speaker: int,
    span=None,
    emphasis_scale: float = 1.0,
    ea_enabled: bool = True,
) -> SynthesisResult:
    """End-to-end inference for one utterance; returns the mel plus the
    prosody tracks the evaluation harness scores."""
    if span is not None:
        span.validate(phonemes)
    mask = span_to_mask(span, len(phonemes))
    result = forward_batch(
        params,
        config,
        stats,
        np.asarray(phonemes.ids)[None, :],
        [emotion],
        [speaker],
        emph_mask=mask.values[None, :],
        ea_strength=config.ea_strength if ea_enabled else 0.0,
        emphasis_scale=emphasis_scale,
        training=False,
    )
    return SynthesisResult(
        mel=result.mel.data[0].astype(np.float32),
        pitch=result.adapter.effective_pitch.data[0].copy(),
        energy=result.adapter.energy_pred.data[0].copy(),
        durations=result.adapter.durations_used[0].copy(),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params, config, stats, step: int = 0):
    """Directory of named tensor files plus model.json."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "config": config.to_dict(),
        "stats": stats.to_dict(),
        "step": step,
        "params": {name: list(t.shape) for name, t in params.items()},
    }
    for name, t in params.items():
        save_tensor(os.path.join(path, f"{name}.bin"), t.data)
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Returns (params, config, stats, meta). Rejects schema or shape drift."""
    manifest_path = os.path.join(path, "model.json")
    try:
        with open(manifest_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise ModelError(f"cannot read checkpoint manifest {manifest_path}: {e}") from e
    except ValueError as e:
        raise ModelError(f"{manifest_path}: corrupt checkpoint manifest: {e}") from e
    if meta.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelError(
            f"{manifest_path}: unsupported checkpoint schema version "
            f"{meta.get('schema_version')!r}"
        )
    config = ModelConfig.from_dict(meta["config"])
    stats = NormalizationStats.from_dict(meta["stats"])
    params = ParameterRegistry()
    for name, shape in meta["params"].items():
        tensor_path = os.path.join(path, f"{name}.bin")
        try:
            arr = load_tensor(tensor_path)
        except OSError as e:
            raise ModelError(f"checkpoint missing tensor {name}: {e}") from e
        if list(arr.shape) != list(shape):
            raise ModelError(
                f"checkpoint tensor {name} has shape {list(arr.shape)}, manifest says {shape}"
            )
        params.add(name, arr)
    return params, config, stats, meta
