"""Two-level cross-attention aggregation and the final embedding.

The frame states from the speaker backbone are prompted with encoded F0
(level 1), optionally probed again with the mel encoding (level 2), and
the result is fused with a bank of learned tokens through multi-head
attention. Every Table-3-style ablation is a `mode` of the same forward.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .audio_io import CANONICAL_RATE, AudioBuffer, resample
from .backbone import BackboneConfig, backbone_forward
from .dsp import F0Contour, MelSpectrogram, mel_spectrogram, yin_f0
from .errors import EmptyContour, IndivisibleHeads, ShapeMismatch
from .nn import (
    affine,
    attention_backward,
    glu_gated_conv,
    multi_head_attention,
    multi_head_attention_backward,
    relu,
    scaled_dot_attention,
)

MODES = ("SE", "SE_F0", "SE_ME", "SE_F0_then_ME", "SE_ME_then_F0")


@dataclass(frozen=True)
class AggregationConfig:
    mode: str = "SE_F0_then_ME"
    splitting: bool = True
    n_tokens: int = 8
    heads: int = 4
    d_model: int = 192
    scale_mode: str = "sqrt"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError("unknown mode %r" % self.mode)
        if self.d_model % self.heads:
            raise IndivisibleHeads("d_model=%d vs heads=%d" % (self.d_model, self.heads))

    @property
    def uses_f0(self):
        return "F0" in self.mode

    @property
    def uses_mel_encoder(self):
        return "ME" in self.mode

    @property
    def two_level(self):
        return "then" in self.mode


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    mode: str
    config_hash: str


def config_hash(backbone_cfg: BackboneConfig, agg_cfg: AggregationConfig) -> str:
    """64-bit hex digest over everything that shapes the forward pass."""
    blob = json.dumps(
        {
            "in_dim": backbone_cfg.in_dim,
            "channels": backbone_cfg.channels,
            "scale": backbone_cfg.scale,
            "dilations": list(backbone_cfg.dilations),
            "d_model": backbone_cfg.d_model,
            "mode": agg_cfg.mode,
            "splitting": agg_cfg.splitting,
            "n_tokens": agg_cfg.n_tokens,
            "heads": agg_cfg.heads,
            "scale_mode": agg_cfg.scale_mode,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def encode_f0(contour: F0Contour, params) -> np.ndarray:
    """F0 contour -> T x d states via a two-layer MLP.

    Per-frame features are (ln(f0/100) if voiced else 0, voiced flag), so
    unvoiced frames all map to one shared embedding.
    """
    if len(contour) == 0:
        raise EmptyContour("empty F0 contour")
    feat = np.zeros((len(contour), 2))
    v = contour.voiced
    feat[v, 0] = np.log(contour.f0_hz[v] / 100.0)
    feat[v, 1] = 1.0
    h = relu(affine(feat, params["fc1.weight"], params["fc1.bias"]))
    return affine(h, params["fc2.weight"], params["fc2.bias"])


def encode_mel(mel: MelSpectrogram, params) -> np.ndarray:
    """Mel frames -> T x d states: two FC+ReLU blocks then a gated conv."""
    h = relu(affine(mel.frames, params["fc1.weight"], params["fc1.bias"]))
    h = relu(affine(h, params["fc2.weight"], params["fc2.bias"]))
    return glu_gated_conv(h, params["glu.kernels"], params["glu.bias"])


def cross_attention_stage(h_query, h_kv, params, scale_mode="sqrt"):
    """One aggregation level: project q/k/v, attend, no residual.

    Inputs are truncated to the shorter sequence; returns (output, trace).
    """
    t = min(h_query.shape[0], h_kv.shape[0])
    q = affine(h_query[:t], params["wq"], params["bq"])
    k = affine(h_kv[:t], params["wk"], params["bk"])
    v = affine(h_kv[:t], params["wv"], params["bv"])
    trace = scaled_dot_attention(q, k, v, scale_mode)
    return trace.output, trace


def level1_attention(h_sv, h_prompt, params, scale_mode="sqrt"):
    """Prompt the backbone frame states with the encoded local/global cue."""
    out, _ = cross_attention_stage(h_sv, h_prompt, params, scale_mode)
    return out


def level2_attention(h_query, h_ca1, params, scale_mode="sqrt"):
    """Probe the level-1 aggregate with the remaining cue as queries."""
    out, _ = cross_attention_stage(h_query, h_ca1, params, scale_mode)
    return out


def cross_attention_stage_backward(h_query, h_kv, params, d_out, scale_mode="sqrt"):
    """Gradients of sum(stage_output * d_out) w.r.t. the stage projections."""
    t = min(h_query.shape[0], h_kv.shape[0])
    hq, hk = h_query[:t], h_kv[:t]
    q = affine(hq, params["wq"], params["bq"])
    k = affine(hk, params["wk"], params["bk"])
    v = affine(hk, params["wv"], params["bv"])
    trace = scaled_dot_attention(q, k, v, scale_mode)
    dq, dk, dv = attention_backward(trace, q, k, v, d_out, scale_mode)
    return {
        "wq": hq.T @ dq,
        "bq": dq.sum(axis=0),
        "wk": hk.T @ dk,
        "bk": dk.sum(axis=0),
        "wv": hk.T @ dv,
        "bv": dv.sum(axis=0),
    }


def split_and_fuse(h, tokens, heads, params):
    """Fuse the aggregate with the learned token bank.

    The time-mean of h queries the tokens via multi-head attention; the
    attention-weighted sum of the (projected) tokens is the embedding.
    """
    if tokens.ndim != 2 or tokens.shape[1] != h.shape[1]:
        raise ShapeMismatch("tokens %s vs states %s" % (tokens.shape, h.shape))
    query = h.mean(axis=0, keepdims=True)
    out, _ = multi_head_attention(query, tokens, tokens, heads, params)
    return out[0]


def split_and_fuse_backward(h, tokens, heads, params, d_out):
    """Gradients of sum(fused * d_out) w.r.t. fusion params and tokens."""
    query = h.mean(axis=0, keepdims=True)
    grads, _dq, dk, dv = multi_head_attention_backward(
        query, tokens, tokens, heads, params, d_out[None, :]
    )
    grads["tokens"] = dk + dv
    return grads


def _group(params, prefix):
    sub = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    if not sub:
        raise ShapeMismatch("no parameters under %r" % prefix)
    return sub


def aggregate(h_sv, z, mel, contour, params, cfg: AggregationConfig):
    """Mode dispatch over already-computed intermediate representations."""
    if cfg.mode == "SE":
        return z
    sm = cfg.scale_mode
    if cfg.mode == "SE_F0":
        h = level1_attention(h_sv, encode_f0(contour, _group(params, "f0_enc.")), _group(params, "level1."), sm)
    elif cfg.mode == "SE_ME":
        h = level1_attention(h_sv, encode_mel(mel, _group(params, "mel_enc.")), _group(params, "level1."), sm)
    elif cfg.mode == "SE_F0_then_ME":
        h1 = level1_attention(h_sv, encode_f0(contour, _group(params, "f0_enc.")), _group(params, "level1."), sm)
        h = level2_attention(encode_mel(mel, _group(params, "mel_enc.")), h1, _group(params, "level2."), sm)
    else:  # SE_ME_then_F0
        h1 = level1_attention(h_sv, encode_mel(mel, _group(params, "mel_enc.")), _group(params, "level1."), sm)
        h = level2_attention(encode_f0(contour, _group(params, "f0_enc.")), h1, _group(params, "level2."), sm)
    if cfg.splitting:
        return split_and_fuse(h, params["tokens"], cfg.heads, _group(params, "fuse."))
    return h.mean(axis=0)


def extract_embedding(buf: AudioBuffer, store, backbone_cfg: BackboneConfig, agg_cfg: AggregationConfig) -> SpeakerEmbedding:
    """Raw audio -> speaker embedding for the configured mode.

    The buffer is canonicalized to 22050 Hz if it is not already there.
    `store` is a ParamStore (weights module).
    """
    if buf.sample_rate_hz != CANONICAL_RATE:
        buf = resample(buf, CANONICAL_RATE)
    mel = mel_spectrogram(buf)
    contour = yin_f0(buf) if agg_cfg.uses_f0 else None
    bb = backbone_forward(mel, store.group("backbone"), backbone_cfg)
    vec = aggregate(bb.frame_states, bb.pooled, mel, contour, store.group("agg"), agg_cfg)
    return SpeakerEmbedding(vec, agg_cfg.mode, config_hash(backbone_cfg, agg_cfg))


EMBEDDING_MAGIC = b"AGVE0001"


def embedding_to_json(emb: SpeakerEmbedding) -> str:
    return json.dumps(
        {
            "mode": emb.mode,
            "d": len(emb.vector),
            "config_hash": emb.config_hash,
            "values": [float(np.float32(v)) for v in emb.vector],
        },
        sort_keys=True,
    )


def embedding_from_json(text: str) -> SpeakerEmbedding:
    obj = json.loads(text)
    vec = np.asarray(obj["values"], dtype=np.float64)
    if len(vec) != obj["d"]:
        raise ShapeMismatch("declared d=%d but %d values" % (obj["d"], len(vec)))
    return SpeakerEmbedding(vec, obj["mode"], obj["config_hash"])


def embedding_to_bytes(emb: SpeakerEmbedding) -> bytes:
    return (
        EMBEDDING_MAGIC
        + struct.pack("<I", len(emb.vector))
        + np.asarray(emb.vector, dtype="<f4").tobytes()
    )


def embedding_from_bytes(data: bytes, mode: str = "", cfg_hash: str = "") -> SpeakerEmbedding:
    if data[:8] != EMBEDDING_MAGIC:
        raise ShapeMismatch("bad embedding magic")
    (d,) = struct.unpack_from("<I", data, 8)
    vec = np.frombuffer(data[12 : 12 + 4 * d], dtype="<f4").astype(np.float64)
    if len(vec) != d:
        raise ShapeMismatch("truncated embedding payload")
    return SpeakerEmbedding(vec, mode, cfg_hash)
