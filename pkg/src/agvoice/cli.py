"""Command-line front end.

Subcommands: init, inspect, embed, mel, f0, simmatrix, abx, selftest.
Exit codes: 0 success, 2 input error, 3 config/weight error, 4 internal
invariant violation. All randomness flows from --seed.
"""

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import aggregation, dsp, evaluation, weights
from .aggregation import AggregationConfig
from .audio_io import AudioBuffer, decode_wav
from .backbone import BackboneConfig
from .errors import AgvError, ConfigError, InputError
from .nn import gradcheck, scaled_dot_attention, attention_backward

MODE_FLAGS = {
    "se": "SE",
    "se+f0": "SE_F0",
    "se+me": "SE_ME",
    "se+f0+me": "SE_F0_then_ME",
    "se+me+f0": "SE_ME_then_F0",
}


def _add_config_flags(p):
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default=None)
    p.add_argument("--no-split", action="store_true", default=None)
    p.add_argument("--tokens", type=int, default=None, metavar="N")
    p.add_argument("--heads", type=int, default=None, metavar="H")
    p.add_argument("--dmodel", type=int, default=None, metavar="D")
    p.add_argument("--channels", type=int, default=None, metavar="C")
    p.add_argument("--scale-mode", choices=["sqrt", "linear"], default=None)


def _configs_from_args(args):
    d = args.dmodel if args.dmodel is not None else 192
    bb = BackboneConfig(channels=args.channels if args.channels is not None else 64, d_model=d)
    agg = AggregationConfig(
        mode=MODE_FLAGS[args.mode] if args.mode is not None else "SE_F0_then_ME",
        splitting=not args.no_split,
        n_tokens=args.tokens if args.tokens is not None else 8,
        heads=args.heads if args.heads is not None else 4,
        d_model=d,
        scale_mode=args.scale_mode if args.scale_mode is not None else "sqrt",
    )
    return bb, agg


def _check_flag_conflicts(args, cfg):
    """Any explicitly given flag must agree with the weight file's config."""
    checks = {
        "mode": (None if args.mode is None else MODE_FLAGS[args.mode], cfg["mode"]),
        "no-split": (None if args.no_split is None else not args.no_split, cfg["splitting"]),
        "tokens": (args.tokens, cfg["n_tokens"]),
        "heads": (args.heads, cfg["heads"]),
        "dmodel": (args.dmodel, cfg["d_model"]),
        "channels": (args.channels, cfg["channels"]),
        "scale-mode": (args.scale_mode, cfg["scale_mode"]),
    }
    for flag, (given, stored) in checks.items():
        if given is not None and given != stored:
            raise ConfigError("--%s=%s conflicts with weight file (%s)" % (flag, given, stored))


def _atomic_write(path, data):
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_audio(path):
    try:
        with open(path, "rb") as f:
            return decode_wav(f.read())
    except OSError as e:
        raise InputError("cannot read %s: %s" % (path, e)) from None


def _read_manifest(path):
    records = []
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except ValueError as e:
                    raise InputError("manifest line %d: %s" % (i + 1, e)) from None
                for key in ("path", "utterance_id", "speaker_id"):
                    if key not in rec:
                        raise InputError("manifest line %d: missing %r" % (i + 1, key))
                rec.setdefault("language", "")
                if not os.path.isabs(rec["path"]):
                    rec["path"] = os.path.join(base, rec["path"])
                records.append(rec)
    except OSError as e:
        raise InputError("cannot read manifest: %s" % e) from None
    ids = [r["utterance_id"] for r in records]
    if len(ids) != len(set(ids)):
        raise InputError("duplicate utterance_id in manifest")
    if not records:
        raise InputError("empty manifest")
    return records


def cmd_init(args):
    bb, agg = _configs_from_args(args)
    store = weights.init_params(bb, agg, args.seed)
    weights.save(store, args.out)
    print("wrote %s (%d tensors, seed %d)" % (args.out, len(store.entries), args.seed))
    return 0


def cmd_inspect(args):
    store = weights.load(args.weights)
    print("seed=%s config_digest=%s" % (store.meta.get("seed"), store.meta.get("config_digest")))
    for name in store.names():
        t = store.entries[name]
        print(
            "%-44s %-14s min=%+.6g max=%+.6g mean=%+.6g"
            % (name, "x".join(map(str, t.shape)), t.min(), t.max(), t.mean())
        )
    return 0


def cmd_embed(args):
    store = weights.load(args.weights)
    bb, agg = weights.configs_from_dict(store.meta["config"])
    _check_flag_conflicts(args, store.meta["config"])
    weights.check_params(store, bb, agg)
    records = _read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    ext = ".json" if args.format == "json" else ".emb"

    def one(rec):
        buf = _read_audio(rec["path"])
        emb = aggregation.extract_embedding(buf, store, bb, agg)
        fname = rec["utterance_id"] + ext
        if args.format == "json":
            _atomic_write(os.path.join(args.out, fname), aggregation.embedding_to_json(emb))
        else:
            _atomic_write(os.path.join(args.out, fname), aggregation.embedding_to_bytes(emb))
        return fname, emb

    n_workers = max(1, int(os.environ.get("AGV_NUM_THREADS", "1")))
    entries, failures = [], []
    results = []
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [(rec, pool.submit(one, rec)) for rec in records]
        for rec, fut in futures:
            results.append((rec, fut))
    else:
        for rec in records:
            results.append((rec, None))

    cfg_hash = aggregation.config_hash(bb, agg)
    for rec, fut in results:
        try:
            fname, emb = fut.result() if fut is not None else one(rec)
        except (AgvError, OSError) as e:
            if not args.keep_going:
                raise
            failures.append((rec["utterance_id"], str(e)))
            continue
        entries.append(
            {
                "utterance_id": rec["utterance_id"],
                "speaker_id": rec["speaker_id"],
                "language": rec["language"],
                "file": fname,
            }
        )
    index = {
        "config_hash": cfg_hash,
        "mode": agg.mode,
        "d": agg.d_model,
        "format": args.format,
        "entries": entries,
    }
    _atomic_write(os.path.join(args.out, "index.json"), json.dumps(index, indent=2, sort_keys=True))
    for uid, msg in failures:
        print("SKIP %s: %s" % (uid, msg), file=sys.stderr)
    print("embedded %d/%d utterances -> %s" % (len(entries), len(records), args.out))
    return 0


def cmd_mel(args):
    mel = dsp.mel_spectrogram(_read_audio(args.audio))
    sys.stdout.write(dsp.mel_to_csv(mel))
    return 0


def cmd_f0(args):
    contour = dsp.yin_f0(_read_audio(args.audio))
    sys.stdout.write(dsp.f0_to_csv(contour))
    return 0


def _load_index_embeddings(index_path):
    base = os.path.dirname(os.path.abspath(index_path))
    try:
        with open(index_path, encoding="utf-8") as f:
            index = json.load(f)
    except (OSError, ValueError) as e:
        raise InputError("cannot read index: %s" % e) from None
    embs = []
    for entry in index["entries"]:
        path = os.path.join(base, entry["file"])
        try:
            if entry["file"].endswith(".json"):
                with open(path, encoding="utf-8") as f:
                    emb = aggregation.embedding_from_json(f.read())
            else:
                with open(path, "rb") as f:
                    emb = aggregation.embedding_from_bytes(f.read(), index.get("mode", ""), index.get("config_hash", ""))
        except OSError as e:
            raise InputError("cannot read %s: %s" % (path, e)) from None
        if len(emb.vector) != index["d"]:
            raise ConfigError("embedding %s has d=%d, index says %d" % (entry["file"], len(emb.vector), index["d"]))
        embs.append((entry, emb))
    if len(embs) < 2:
        raise InputError("need at least 2 embeddings")
    return embs


def cmd_simmatrix(args):
    embs = _load_index_embeddings(args.index)
    key = {"speaker": "speaker_id", "language": "language"}.get(args.group_by)
    if key:
        groups = {}
        for entry, emb in embs:
            groups.setdefault(entry[key], []).append(emb.vector)
        labels = sorted(groups)
        vecs = [np.mean(groups[label], axis=0) for label in labels]
        matrix = evaluation.cross_similarity(vecs, vecs, labels, labels)
        dom = evaluation.diagonal_dominance(matrix)
    else:
        labels = [entry["utterance_id"] for entry, _ in embs]
        vecs = [emb.vector for _, emb in embs]
        matrix = evaluation.cross_similarity(vecs, vecs, labels, labels)
        # dominance needs one column per speaker: pool by speaker on the side
        groups = {}
        for entry, emb in embs:
            groups.setdefault(entry["speaker_id"], []).append(emb.vector)
        sp = sorted(groups)
        pooled = [np.mean(groups[s], axis=0) for s in sp]
        dom = evaluation.diagonal_dominance(evaluation.cross_similarity(pooled, pooled, sp, sp))
    _atomic_write(args.out + ".csv", evaluation.matrix_to_csv(matrix))
    _atomic_write(args.out + ".pgm", evaluation.matrix_to_pgm(matrix))
    print("diagonal_dominance %.6g" % dom)
    return 0


def _read_embedding_file(path):
    try:
        if path.endswith(".json"):
            with open(path, encoding="utf-8") as f:
                return aggregation.embedding_from_json(f.read())
        with open(path, "rb") as f:
            return aggregation.embedding_from_bytes(f.read())
    except OSError as e:
        raise InputError("cannot read %s: %s" % (path, e)) from None


def cmd_abx(args):
    ref = _read_embedding_file(args.reference)
    cands = [_read_embedding_file(p) for p in args.candidates]
    idx = evaluation.abx_select(ref, cands)
    stem = os.path.basename(args.candidates[idx])
    print(stem[: stem.rfind(".")] if "." in stem else stem)
    return 0


def _selftest_gradchecks(rng):
    # The key bias has an exactly-zero gradient (softmax cancels a per-row
    # logit shift), so the comparison floor must sit above the central
    # difference roundoff, which scales with |f|.
    def floor_for(f, xs):
        return max(1e-8, 1e-4 * (1.0 + abs(f(xs))))

    worst = 0.0
    tq, tk, d = 3, 4, 5
    for _ in range(3):
        q, k, v = rng.standard_normal((tq, d)), rng.standard_normal((tk, d)), rng.standard_normal((tk, d))

        def f(xs):
            return float(scaled_dot_attention(xs[0], xs[1], xs[2]).output.sum())

        def g(xs):
            tr = scaled_dot_attention(xs[0], xs[1], xs[2])
            return list(attention_backward(tr, xs[0], xs[1], xs[2], np.ones_like(tr.output)))

        worst = max(worst, gradcheck(f, g, [q, k, v], abs_floor=floor_for(f, [q, k, v])).max_rel_error)

    d = 8
    hq, hkv = rng.standard_normal((4, d)), rng.standard_normal((4, d))
    names = ["wq", "bq", "wk", "bk", "wv", "bv"]
    stage_p = {n: (rng.standard_normal((d, d)) * 0.3 if n.startswith("w") else rng.standard_normal(d) * 0.1) for n in names}

    def f_stage(xs):
        p = dict(zip(names, xs))
        out, _ = aggregation.cross_attention_stage(hq, hkv, p)
        return float(out.sum())

    def g_stage(xs):
        p = dict(zip(names, xs))
        grads = aggregation.cross_attention_stage_backward(hq, hkv, p, np.ones((4, d)))
        return [grads[n] for n in names]

    xs_stage = [stage_p[n] for n in names]
    worst = max(worst, gradcheck(f_stage, g_stage, xs_stage, abs_floor=floor_for(f_stage, xs_stage)).max_rel_error)

    fuse_names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    fuse_p = {n: (rng.standard_normal((d, d)) * 0.3 if n.startswith("w") else rng.standard_normal(d) * 0.1) for n in fuse_names}
    tokens = rng.standard_normal((3, d))
    h = rng.standard_normal((5, d))

    def f_fuse(xs):
        p = dict(zip(fuse_names, xs[:-1]))
        return float(aggregation.split_and_fuse(h, xs[-1], 2, p).sum())

    def g_fuse(xs):
        p = dict(zip(fuse_names, xs[:-1]))
        grads = aggregation.split_and_fuse_backward(h, xs[-1], 2, p, np.ones(d))
        return [grads[n] for n in fuse_names] + [grads["tokens"]]

    xs_fuse = [fuse_p[n] for n in fuse_names] + [tokens]
    worst = max(worst, gradcheck(f_fuse, g_fuse, xs_fuse, abs_floor=floor_for(f_fuse, xs_fuse)).max_rel_error)
    return worst


def cmd_selftest(args):
    from .audio_io import CANONICAL_RATE

    failures = []
    rng = np.random.default_rng(args.seed)

    worst_grad = _selftest_gradchecks(rng)
    print("gradcheck worst relative error: %.3g" % worst_grad)
    if worst_grad >= 1e-6:
        failures.append("gradcheck")

    # DSP tone suite
    t = np.arange(CANONICAL_RATE) / CANONICAL_RATE
    for freq in (110.0, 220.0, 440.0):
        buf = AudioBuffer(0.5 * np.sin(2 * np.pi * freq * t), CANONICAL_RATE)
        c = dsp.yin_f0(buf)
        interior = slice(1, len(c) - 1)
        ok = np.abs(c.f0_hz[interior] - freq) < 0.5
        frac = (ok & c.voiced[interior]).mean()
        print("yin %g Hz: %.1f%% frames within 0.5 Hz" % (freq, 100 * frac))
        if frac < 0.95:
            failures.append("yin %g" % freq)
    silence = dsp.yin_f0(AudioBuffer(np.zeros(CANONICAL_RATE // 4), CANONICAL_RATE))
    if silence.voiced.any():
        failures.append("silence voiced")
    else:
        print("silence: 100% unvoiced")

    # serialization round trip
    if args.weights:
        store = weights.load(args.weights)  # raises ConfigError -> exit 3
        print("weight file ok: %d tensors" % len(store.entries))
    bb = BackboneConfig(channels=16, d_model=8)
    agg = AggregationConfig(mode="SE_F0_then_ME", n_tokens=2, heads=2, d_model=8)
    store = weights.init_params(bb, agg, args.seed)
    import io

    b1, b2 = io.BytesIO(), io.BytesIO()
    weights.save(store, b1)
    weights.save(weights.load(io.BytesIO(b1.getvalue())), b2)
    if b1.getvalue() != b2.getvalue():
        failures.append("serialization round trip")
    else:
        print("serialization round trip: bit-exact")

    if failures:
        print("FAIL: " + ", ".join(failures))
        return 4
    print("PASS")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="agvoice", description="Speaker embeddings via multi-level attention aggregation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("init", help="create a seeded weight file")
    _add_config_flags(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("inspect", help="list tensors in a weight file")
    sp.add_argument("--weights", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("embed", help="extract embeddings for a JSONL manifest")
    sp.add_argument("manifest")
    _add_config_flags(sp)
    sp.add_argument("--weights", required=True, metavar="PATH")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.add_argument("--format", choices=["json", "bin"], default="json")
    sp.add_argument("--keep-going", action="store_true")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("mel", help="dump the log-mel spectrogram as CSV")
    sp.add_argument("audio")
    sp.set_defaults(func=cmd_mel)

    sp = sub.add_parser("f0", help="dump the YIN F0 contour as CSV")
    sp.add_argument("audio")
    sp.set_defaults(func=cmd_f0)

    sp = sub.add_parser("simmatrix", help="cross-similarity matrix from an embedding index")
    sp.add_argument("index")
    sp.add_argument("--group-by", choices=["speaker", "language"], default=None)
    sp.add_argument("--out", required=True, metavar="PREFIX")
    sp.set_defaults(func=cmd_simmatrix)

    sp = sub.add_parser("abx", help="pick the candidate closest to a reference embedding")
    sp.add_argument("--reference", required=True, metavar="PATH")
    sp.add_argument("candidates", nargs="+")
    sp.set_defaults(func=cmd_abx)

    sp = sub.add_parser("selftest", help="gradchecks, DSP tone suite, serialization round trip")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--weights", default=None, metavar="PATH")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 3
    except AgvError as e:
        print("internal error: %s" % e, file=sys.stderr)
        return 4


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
