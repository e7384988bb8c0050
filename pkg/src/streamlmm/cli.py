"""``streamlmm`` command line: gen-data, train, decode, bench, verify.

Every invocation writes one run manifest (JSON) recording the command,
configuration, seeds, input/output paths, library versions, wall time and a
result summary.  Exit codes: 0 success, 1 verification failure, 2 input error.
Set ``STREAMLMM_SEED`` to override every ``--seed`` flag.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__, bench, verify
from .densedata import (
    CorpusError,
    DenseCaptionDoc,
    InstructionTriplet,
    SymbolVideo,
    SynthCorpus,
    Tokenizer,
    load_corpus,
    read_corpus_header,
    synth_generate,
    synth_tokenizer,
    write_synth_corpus,
)
from .model import ModelConfig, StreamLMM, read_config_file
from .numkit import load_checkpoint
from .rope3d import ConfigError
from .stream import (
    Clock,
    ScheduleError,
    decode_offline_oracle,
    decode_streaming,
    freshness_report,
    load_schedule,
    write_schedule,
    write_transcript,
)
from .tokens import TimedToken
from .train import DivergenceError, TrainConfig, items_from_corpus, train

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
SEED_ENV = "STREAMLMM_SEED"

log = logging.getLogger("streamlmm")


class InputError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None


def _versions() -> dict:
    return {"streamlmm": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_manifest(path, manifest: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args, run: dict):
    seed = _seed(args)
    os.makedirs(args.out, exist_ok=True)
    corpus = synth_generate(
        seed, args.videos, duration=args.duration, fps=args.fps, n_symbols=args.symbols,
        triplets_per_video=args.triplets_per_video, answer_len=args.answer_len, decode_rate=args.decode_rate,
    )
    now_path = os.path.join(args.out, "corpus.jsonl")
    fut_path = os.path.join(args.out, "future.jsonl")
    write_synth_corpus(now_path, corpus)
    write_synth_corpus(fut_path, corpus, future=True)
    outputs = [now_path, fut_path]
    # sample inference schedules: the same videos re-sampled at the inference frame rate
    sched_dir = os.path.join(args.out, "schedules")
    if args.schedules:
        os.makedirs(sched_dir, exist_ok=True)
    for video in corpus.videos[: args.schedules]:
        n = int(round(video.duration * args.schedule_fps))
        entries = [{"time": k / args.schedule_fps, "symbol": video.symbol_at(k / args.schedule_fps)} for k in range(n)]
        p = os.path.join(sched_dir, f"{video.video_id}.jsonl")
        write_schedule(p, entries)
        outputs.append(p)
    run.update(seeds={"corpus": seed}, outputs=outputs, config=corpus.params)
    run["result"] = {"videos": len(corpus.videos), "triplets": len(corpus.triplets), "future_triplets": len(corpus.future_triplets)}
    print(f"wrote {len(corpus.videos)} videos, {len(corpus.triplets)} triplets to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def read_corpus_file(path):
    """Load a corpus file as (SynthCorpus-shaped container, tokenizer, header)."""
    try:
        head = read_corpus_header(path)
        records = list(load_corpus(path))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None
    videos = [r for r in records if isinstance(r, SymbolVideo)]
    docs = [r for r in records if isinstance(r, DenseCaptionDoc)]
    tris = [r for r in records if isinstance(r, InstructionTriplet)]
    known = {v.video_id for v in videos}
    for t in tris:
        if t.video_id not in known:
            raise InputError(f"{path}: triplet refers to unknown video {t.video_id!r}")
    if not tris:
        raise InputError(f"{path}: no triplets")
    gen = head.get("generator") or {}
    if "n_symbols" in gen:
        tok = synth_tokenizer(int(gen["n_symbols"]))
    else:
        tok = Tokenizer.from_texts([t.instruction for t in tris] + [t.answer for t in tris])
    container = SynthCorpus(head.get("seed"), videos, docs, tris, tris, gen)
    return container, tok, head


def _model_config(args, tok: Tokenizer, n_symbols: int) -> ModelConfig:
    if args.config:
        try:
            cfg = read_config_file(args.config)
        except OSError as exc:
            raise InputError(f"{args.config}: {exc}") from None
    else:
        cfg = ModelConfig(vocab=len(tok), n_symbols=n_symbols, **verify.A5_MODEL)
    over = {}
    if args.gate_kind:
        over["gate_kind"] = args.gate_kind
    if args.reuse_params:
        over["reuse_params"] = args.reuse_params
    if args.use_vffn is not None:
        over["use_vffn"] = args.use_vffn
    cfg = cfg.replace(seed=_seed(args), **over)
    if cfg.vocab < len(tok):
        raise InputError(f"config vocab {cfg.vocab} < tokenizer size {len(tok)}")
    if cfg.frame_mode != "symbolic" or cfg.n_symbols < n_symbols:
        raise InputError("the corpus has symbolic frames: need frame_mode=symbolic and enough n_symbols")
    return cfg


def cmd_train(args, run: dict):
    corpus, tok, head = read_corpus_file(args.corpus)
    n_symbols = max((max(v.symbols) for v in corpus.videos if v.symbols), default=0) + 1
    cfg = _model_config(args, tok, max(n_symbols, int((head.get("generator") or {}).get("n_symbols", 0))))
    seed = cfg.seed
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=seed, decode_rate=args.decode_rate, max_frames=args.max_frames)
    items = items_from_corpus(corpus, tok, decode_rate=tcfg.decode_rate, max_frames=tcfg.max_frames)
    model = StreamLMM(cfg)
    curve = args.loss_curve or os.path.splitext(args.out)[0] + ".loss.jsonl"
    run.update(config={"model": cfg.to_dict(), "train": vars(tcfg)}, seeds={"model": seed, "batches": seed, "corpus": head.get("seed")},
               inputs=[p for p in (args.corpus, args.config) if p], outputs=[args.out, curve])
    with open(curve, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "streamlmm-loss", "version": 1, "items": len(items)}) + "\n")

        def record(step, loss):
            fh.write(json.dumps({"step": step, "loss": loss}) + "\n")

        try:
            hist = train(model, items, tcfg, callback=record)
        except DivergenceError as exc:
            run["result"] = {"diverged": str(exc)}
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
    model.save(args.out, {"tokenizer": tok.to_list(), "train": vars(tcfg)})
    run["result"] = {"items": len(items), "first_loss": hist[0], "last_loss": hist[-1], "ln_vocab": float(np.log(cfg.vocab))}
    print(f"trained {tcfg.steps} steps: loss {hist[0]:.4f} -> {hist[-1]:.4f}; checkpoint {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def _load_model(path):
    try:
        _, meta = load_checkpoint(path)
        model = StreamLMM.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from None
    tok = Tokenizer.from_list(meta["tokenizer"]) if "tokenizer" in meta else None
    return model, tok


def cmd_decode(args, run: dict):
    model, tok = _load_model(args.checkpoint)
    try:
        schedule = load_schedule(args.schedule)
    except OSError as exc:
        raise InputError(f"{args.schedule}: {exc}") from None
    if tok is not None:
        ids = tok.encode(args.question)
        eos = tok.eos
    else:
        try:
            ids = [int(w) for w in args.question.split()]
        except ValueError:
            raise InputError("checkpoint has no tokenizer: pass the question as token ids") from None
        eos = None
    if not ids:
        raise InputError("empty question")
    if max(ids) >= model.cfg.vocab:
        raise InputError("question token outside the model vocabulary")
    question = [TimedToken(i, args.t_q) for i in ids]
    clock = Clock(mode=args.clock, decode_rate=args.decode_rate)
    kw = dict(max_tokens=args.max_tokens, eos=eos, capacity=args.capacity)
    if args.mode == "offline-oracle":
        if args.clock != "simulated":
            raise InputError("offline-oracle mode needs the simulated clock")
        result = decode_offline_oracle(schedule, question, model, clock, **kw)
    else:
        result = decode_streaming(schedule, question, model, clock, fixed_context=args.mode == "fixed-context", **kw)
    fresh = freshness_report(result.tokens, [t for _, t in schedule], result.attended)
    late = [max(a) for a in result.attended if a and max(a) > args.t_q] if args.mode == "fixed-context" else []
    audit = {
        "attended_counts": [len(a) for a in result.attended],
        "any_future_frame": any(max(a, default=-np.inf) > tk.time for tk, a in zip(result.tokens, result.attended)),
        "fixed_context_violations": len(late),
    }
    detok = None
    if tok is not None:
        # the model vocabulary may be larger than the tokenizer's
        detok = lambda i: tok.itos[i] if i < len(tok) else f"<id{i}>"
    summary = {"freshness": {k: v for k, v in fresh.items() if k != "lags"}, "audit": audit}
    write_transcript(args.out, result, detok, {"mode": args.mode, "t_q": args.t_q, "clock": args.clock, "decode_rate": args.decode_rate}, summary)
    text = " ".join(detok(t.token) for t in result.tokens) if detok else " ".join(str(t.token) for t in result.tokens)
    run.update(config={"mode": args.mode, "clock": args.clock, "decode_rate": args.decode_rate, "capacity": args.capacity, "max_tokens": args.max_tokens, "t_q": args.t_q, "question": args.question},
               inputs=[args.checkpoint, args.schedule], outputs=[args.out])
    run["result"] = {"status": result.status, "error": result.error, "answer": text, "times": [t.time for t in result.tokens], **summary}
    print(text)
    print(f"freshness: newest-frame fraction {fresh['newest_fraction']}, mean lag {fresh['mean_lag']}")
    if result.status != "ok":
        print(f"error: {result.error}", file=sys.stderr)
        return EXIT_FAIL
    if audit["any_future_frame"] or audit["fixed_context_violations"]:
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("frame counts must be non-negative")
    return vals


def cmd_bench(args, run: dict):
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        if model.cfg.dtype != args.dtype:
            model = _recast(model, args.dtype)
    else:
        model = StreamLMM(ModelConfig(dtype=args.dtype, seed=_seed(args)))
    rows = bench.run_bench(model, args.frames, args.text_len, args.repeats, _seed(args))
    summ = bench.summarize(rows)
    records = [dict(vars(r)) for r in rows]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": "streamlmm-bench", "version": 1, "text_len": args.text_len, "tokens_per_frame": model.cfg.tokens_per_frame, "dtype": args.dtype}) + "\n")
            for rec in records:
                fh.write(json.dumps(_jsonable(rec)) + "\n")
            fh.write(json.dumps(_jsonable({"type": "summary", **summ})) + "\n")
    print(f"{'arch':7s} {'frames':>6s} {'flops':>14s} {'median ms':>10s}")
    for r in rows:
        print(f"{r.arch:7s} {r.frames:6d} {r.flops_counted:14d} {1e3 * r.wall_median_s:10.3f}")
    for arch in ("cross", "concat"):
        fit = summ[arch]["flop_fit"]
        print(f"{arch}: linear R2 {fit['linear_r2']:.6f}, quadratic coef {fit['quadratic_coef'][0]:.4g}, log-log exponent {fit['loglog_exponent']}")
    run.update(config={"model": model.cfg.to_dict(), "frames": args.frames, "text_len": args.text_len, "repeats": args.repeats},
               seeds={"inputs": _seed(args)}, inputs=[args.checkpoint] if args.checkpoint else [], outputs=[args.out] if args.out else [])
    run["result"] = {"summary": summ, "formula_matches_counter": all(r.flops_formula == r.flops_counted for r in rows)}
    return EXIT_OK if run["result"]["formula_matches_counter"] else EXIT_FAIL


def _recast(model: StreamLMM, dtype: str) -> StreamLMM:
    other = StreamLMM(model.cfg.replace(dtype=dtype))
    for name, p in model.named_params().items():
        other.named_params()[name].value[...] = p.value
    return other


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args, run: dict):
    try:
        report = verify.run_suite(args.suite)
    except KeyError as exc:
        raise InputError(exc.args[0]) from None
    report = _jsonable(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    subs = report.get("reports", {args.suite: report})
    for name, rep in subs.items():
        print(f"{'PASS' if rep['passed'] else 'FAIL'} {name}")
    run.update(config={"suite": args.suite}, outputs=[args.out] if args.out else [])
    run["result"] = {"passed": report["passed"], "suites": {k: v["passed"] for k, v in subs.items()}}
    return EXIT_OK if report["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamlmm", description=__doc__.split("\n")[0])
    p.add_argument("--manifest", help="run manifest path (default: next to the main output)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic symbol-video corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--videos", type=int, default=2000)
    g.add_argument("--duration", type=float, default=16.0, help="seconds per video (default 16)")
    g.add_argument("--fps", type=float, default=1.0, help="training frame sampling rate (default 1)")
    g.add_argument("--symbols", type=int, default=8)
    g.add_argument("--triplets-per-video", type=int, default=5)
    g.add_argument("--answer-len", type=int, default=6)
    g.add_argument("--decode-rate", type=float, default=1.0, help="answer tokens per second (default 1)")
    g.add_argument("--schedules", type=int, default=3, help="number of inference schedules to write")
    g.add_argument("--schedule-fps", type=float, default=5.0, help="inference frame rate (default 5)")
    g.set_defaults(func=cmd_gen_data, primary="out")

    t = sub.add_parser("train", help="train the toy model on a corpus file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="model config (.ini, [model] section); default: small symbolic config")
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--loss-curve", help="per-step loss JSONL (default: <out>.loss.jsonl)")
    t.add_argument("--steps", type=int, default=400)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--decode-rate", type=float, default=1.0)
    t.add_argument("--max-frames", type=int, default=32, help="visual frame cap per item (default 32)")
    t.add_argument("--gate-kind", choices=["linear", "tanh", "none"])
    t.add_argument("--reuse-params", choices=["share", "copy", "off"])
    t.add_argument("--use-vffn", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=cmd_train, primary="out")

    d = sub.add_parser("decode", help="answer a question over a frame schedule")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--schedule", required=True)
    d.add_argument("--question", required=True, help="instruction text (or token ids if the checkpoint has no tokenizer)")
    d.add_argument("--t-q", type=float, default=0.0, help="question time in seconds")
    d.add_argument("--mode", choices=["streaming", "offline-oracle", "fixed-context"], default="streaming")
    d.add_argument("--clock", choices=["simulated", "realtime"], default="simulated")
    d.add_argument("--decode-rate", type=float, default=1.0)
    d.add_argument("--capacity", type=int, default=32, help="frame queue capacity (default 32)")
    d.add_argument("--max-tokens", type=int, default=16)
    d.add_argument("--out", required=True, help="transcript JSONL")
    d.set_defaults(func=cmd_decode, primary="out")

    b = sub.add_parser("bench", help="cross-attention vs concatenation cost per context refresh")
    b.add_argument("--frames", type=_int_list, default=[0, 8, 16, 32, 64], help="comma-separated frame counts")
    b.add_argument("--text-len", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    b.add_argument("--checkpoint")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="results JSONL")
    b.set_defaults(func=cmd_bench, primary="out")

    v = sub.add_parser("verify", help="run an oracle/invariant suite")
    v.add_argument("suite", nargs="?", default="quick", help=f"one of {', '.join(sorted(verify.SUITES))}, quick, all")
    v.add_argument("--out", help="JSON report path")
    v.set_defaults(func=cmd_verify, primary="out")
    return p


def _manifest_path(args) -> str:
    if args.manifest:
        return args.manifest
    main = getattr(args, args.primary, None)
    if main:
        base = main.rstrip("/\\")
        return os.path.join(base, "manifest.json") if os.path.isdir(base) else os.path.splitext(base)[0] + ".manifest.json"
    return f"streamlmm-{args.command}.manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    run = {"command": args.command, "argv": list(argv), "config": {}, "seeds": {}, "inputs": [], "outputs": [],
           "versions": _versions(), "seed_env": os.environ.get(SEED_ENV)}
    t0 = time.perf_counter()
    try:
        code = args.func(args, run)
    except (InputError, CorpusError, ScheduleError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        run["error"] = str(exc)
        code = EXIT_INPUT
    run["wall_time_s"] = time.perf_counter() - t0
    run["exit_code"] = code
    try:
        write_manifest(_manifest_path(args), run)
    except OSError as exc:
        print(f"warning: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
