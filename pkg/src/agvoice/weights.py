"""Seeded parameter initialization and the AGVW weight-file format.

Every draw is keyed by (seed, sha256(name)), so the set of tensors or
their creation order never changes the values of the others. Compute is
float64 in memory; files store float32 payloads bit-exactly.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationConfig, config_hash
from .backbone import BackboneConfig
from .errors import (
    BadMagic,
    HeaderMismatch,
    InvalidConfig,
    MissingParameter,
    TruncatedPayload,
)

WEIGHTS_MAGIC = b"AGVW0001"
FORMAT_VERSION = 1


class _ParamView(dict):
    def __missing__(self, key):
        raise MissingParameter("missing parameter %r" % key)


@dataclass(frozen=True)
class ParamStore:
    entries: dict
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        try:
            return self.entries[name]
        except KeyError:
            raise MissingParameter("missing parameter %r" % name) from None

    def group(self, prefix):
        """All tensors under `prefix.`, keyed by the remainder of the name."""
        p = prefix + "."
        return _ParamView({k[len(p):]: v for k, v in self.entries.items() if k.startswith(p)})

    def names(self):
        return sorted(self.entries)


def param_shapes(bb: BackboneConfig, agg: AggregationConfig) -> dict:
    """Name -> shape census for the active configuration."""
    if bb.d_model != agg.d_model:
        raise InvalidConfig("backbone d_model %d != aggregation d_model %d" % (bb.d_model, agg.d_model))
    c, b, d = bb.channels, bb.bottleneck, bb.d_model
    g = c // bb.scale
    shapes = {
        "backbone.conv_in.weight": (bb.in_dim, c),
        "backbone.conv_in.bias": (c,),
        "backbone.mfa.weight": (bb.n_blocks * c, c),
        "backbone.mfa.bias": (c,),
        "backbone.proj_frames.weight": (c, d),
        "backbone.proj_frames.bias": (d,),
        "backbone.pool.w1": (c, b),
        "backbone.pool.b1": (b,),
        "backbone.pool.w2": (b, c),
        "backbone.pool.b2": (c,),
        "backbone.proj_pooled.weight": (2 * c, d),
        "backbone.proj_pooled.bias": (d,),
    }
    for i in range(1, bb.n_blocks + 1):
        p = "backbone.block%d." % i
        shapes[p + "conv_in.weight"] = (c, c)
        shapes[p + "conv_in.bias"] = (c,)
        shapes[p + "conv_out.weight"] = (c, c)
        shapes[p + "conv_out.bias"] = (c,)
        for j in range(2, bb.scale + 1):
            shapes[p + "group%d.kernels" % j] = (g, g, 3)
        shapes[p + "se.w1"] = (c, b)
        shapes[p + "se.b1"] = (b,)
        shapes[p + "se.w2"] = (b, c)
        shapes[p + "se.b2"] = (c,)

    if agg.mode != "SE":
        if agg.uses_f0:
            shapes.update(
                {
                    "agg.f0_enc.fc1.weight": (2, d),
                    "agg.f0_enc.fc1.bias": (d,),
                    "agg.f0_enc.fc2.weight": (d, d),
                    "agg.f0_enc.fc2.bias": (d,),
                }
            )
        if agg.uses_mel_encoder:
            shapes.update(
                {
                    "agg.mel_enc.fc1.weight": (bb.in_dim, d),
                    "agg.mel_enc.fc1.bias": (d,),
                    "agg.mel_enc.fc2.weight": (d, d),
                    "agg.mel_enc.fc2.bias": (d,),
                    "agg.mel_enc.glu.kernels": (2 * d, d, 3),
                    "agg.mel_enc.glu.bias": (2 * d,),
                }
            )
        levels = ["level1", "level2"] if agg.two_level else ["level1"]
        for lvl in levels:
            for w, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
                shapes["agg.%s.%s" % (lvl, w)] = (d, d)
                shapes["agg.%s.%s" % (lvl, bias)] = (d,)
        if agg.splitting:
            shapes["agg.tokens"] = (agg.n_tokens, d)
            for w, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
                shapes["agg.fuse.%s" % w] = (d, d)
                shapes["agg.fuse.%s" % bias] = (d,)
    return shapes


def _name_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def _init_tensor(name, shape, seed, d_model):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), _name_hash(name)])))
    if name == "agg.tokens":
        return rng.normal(0.0, 1.0 / np.sqrt(d_model), size=shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 3:
        c_out, c_in, k = shape
        a = np.sqrt(6.0 / (c_in * k + c_out * k))
    else:
        a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


def _config_dict(bb: BackboneConfig, agg: AggregationConfig) -> dict:
    return {
        "in_dim": bb.in_dim,
        "channels": bb.channels,
        "scale": bb.scale,
        "n_blocks": bb.n_blocks,
        "dilations": list(bb.dilations),
        "d_model": bb.d_model,
        "mode": agg.mode,
        "splitting": agg.splitting,
        "n_tokens": agg.n_tokens,
        "heads": agg.heads,
        "scale_mode": agg.scale_mode,
    }


def configs_from_dict(cfg: dict):
    bb = BackboneConfig(
        in_dim=cfg["in_dim"],
        channels=cfg["channels"],
        scale=cfg["scale"],
        n_blocks=cfg["n_blocks"],
        dilations=tuple(cfg["dilations"]),
        d_model=cfg["d_model"],
    )
    agg = AggregationConfig(
        mode=cfg["mode"],
        splitting=cfg["splitting"],
        n_tokens=cfg["n_tokens"],
        heads=cfg["heads"],
        d_model=cfg["d_model"],
        scale_mode=cfg["scale_mode"],
    )
    return bb, agg


def init_params(bb: BackboneConfig, agg: AggregationConfig, seed: int) -> ParamStore:
    """Deterministic seeded store for the given configuration.

    PRNG: NumPy PCG64, keyed per tensor via SeedSequence([seed, sha256(name)]).
    Affine weights are uniform(+-sqrt(6/(fan_in+fan_out))), conv kernels the
    same with fans over taps, biases zero, token rows N(0, 1/sqrt(d)).
    """
    shapes = param_shapes(bb, agg)
    entries = {name: _init_tensor(name, shape, seed, agg.d_model) for name, shape in shapes.items()}
    meta = {
        "seed": int(seed),
        "config": _config_dict(bb, agg),
        "config_digest": config_hash(bb, agg),
        "format_version": FORMAT_VERSION,
    }
    return ParamStore(entries, meta)


def check_params(store: ParamStore, bb: BackboneConfig, agg: AggregationConfig):
    """Strict census check: no missing, no extra, no shape drift."""
    expected = param_shapes(bb, agg)
    missing = sorted(set(expected) - set(store.entries))
    if missing:
        raise MissingParameter("missing parameters: %s" % ", ".join(missing))
    extra = sorted(set(store.entries) - set(expected))
    if extra:
        raise InvalidConfig("unexpected parameters: %s" % ", ".join(extra))
    for name, shape in expected.items():
        if tuple(store.entries[name].shape) != tuple(shape):
            raise InvalidConfig("parameter %s has shape %s, expected %s" % (name, store.entries[name].shape, shape))


def save(store: ParamStore, sink):
    """Write the AGVW0001 container (path or binary file object)."""
    names = store.names()
    payloads = [np.ascontiguousarray(store.entries[n], dtype="<f4").tobytes() for n in names]
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "dtype": "f32",
            "payload_bytes": sum(len(p) for p in payloads),
            "meta": store.meta,
            "tensors": [{"name": n, "shape": list(store.entries[n].shape)} for n in names],
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    blob = WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header + b"".join(payloads)
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        with open(sink, "wb") as f:
            f.write(blob)


def load(source) -> ParamStore:
    """Read an AGVW0001 file; validates sizes before building any tensor."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as f:
            data = f.read()
    if data[:8] != WEIGHTS_MAGIC:
        raise BadMagic("bad weight-file magic %r" % data[:8])
    if len(data) < 12:
        raise TruncatedPayload("file ends inside the header length field")
    (hlen,) = struct.unpack_from("<I", data, 8)
    if len(data) < 12 + hlen:
        raise TruncatedPayload("file ends inside the header")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as e:
        raise HeaderMismatch("unparseable header: %s" % e) from None
    declared = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if declared != header.get("payload_bytes"):
        raise HeaderMismatch(
            "tensor shapes imply %d payload bytes, header declares %s" % (declared, header.get("payload_bytes"))
        )
    payload = data[12 + hlen :]
    if len(payload) < declared:
        raise TruncatedPayload("payload is %d bytes, expected %d" % (len(payload), declared))
    if len(payload) > declared:
        raise HeaderMismatch("payload is %d bytes, expected %d" % (len(payload), declared))

    entries = {}
    pos = 0
    for t in header["tensors"]:
        shape = tuple(int(s) for s in t["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).astype(np.float64)
        entries[t["name"]] = arr.reshape(shape)
        pos += 4 * count
    return ParamStore(entries, header["meta"])
