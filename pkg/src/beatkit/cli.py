"""``beatkit`` command line: data generation, training, decoding, evaluation,
DSA benchmarking and attention export.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import ctypes
import ctypes.util
import dataclasses
import logging
import math
import os
import sys
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import io as bio
from . import tensor as tn
from .checkpoint import CheckpointError, load, save
from .dbn import DBNConfig, DBNConfigError, build_state_space, viterbi_decode
from .dsa import ConfigError, DSAConfig, dsa_forward
from .markov import (MAX_FRAMES, MarkovError, capture_attention, export_matrix, export_name,
                     layer_attention_matrix, multi_step_product)
from .metrics import MetricReport, evaluate
from .model import BeatTransformer, EncoderConfig
from .reference import masked_reference_attention
from .synth import SynthParams, synth_clip
from .targets import AnnotationError
from .training import DivergenceError, TrainConfig, new_state, train_loop

log = logging.getLogger("beatkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
MANIFEST = "run_manifest.json"
DATA_MANIFEST = "manifest.json"
SCOPES = ("model", "train", "dbn", "synth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def thread_cap() -> int:
    raw = os.environ.get("BEATKIT_THREADS", "")
    try:
        return max(1, int(raw)) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"BEATKIT_THREADS must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# resolved configuration
# ---------------------------------------------------------------------------

def split_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    """``--set scope.key=value`` pairs grouped by scope; bare keys go to model."""
    out: dict[str, dict[str, str]] = {s: {} for s in SCOPES}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        scope, _, name = key.strip().rpartition(".")
        scope = scope or "model"
        if scope not in out:
            raise UsageError(f"unknown override scope {scope!r} (use one of {', '.join(SCOPES)})")
        out[scope][name] = val.strip()
    return out


def _coerce(cls, base, kv: dict[str, str]):
    names = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in kv.items():
        if key not in names:
            raise UsageError(f"unknown {cls.__name__} key {key!r}")
        cur = getattr(base, key)
        try:
            if isinstance(cur, bool):
                updates[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, int):
                updates[key] = int(raw)
            elif isinstance(cur, float) or cur is None:
                updates[key] = float(raw)
            elif isinstance(cur, tuple):
                updates[key] = tuple(float(v) if "." in v else int(v) for v in raw.split(",") if v)
            else:
                updates[key] = raw
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    try:
        return dataclasses.replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def model_config(args, overrides) -> EncoderConfig:
    base = EncoderConfig.paper() if args.profile == "paper" else EncoderConfig.desk()
    try:
        return EncoderConfig.from_mapping(overrides["model"], base)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from exc


def train_config(args, overrides) -> TrainConfig:
    return _coerce(TrainConfig, TrainConfig(seed=args.seed), overrides["train"])


def dbn_config(overrides, fps: float) -> DBNConfig:
    return _coerce(DBNConfig, DBNConfig(fps=fps), overrides["dbn"])


def synth_params(overrides, frames: int) -> SynthParams:
    return _coerce(SynthParams, SynthParams(n_frames=frames), overrides["synth"])


def write_run_manifest(out_dir: Path, args, config: dict, inputs=(), outputs=()) -> None:
    def digest(paths):
        return {str(p): bio.sha256_file(p) for p in paths if Path(p).is_file()}
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    bio.write_json(out_dir / MANIFEST, {
        "beatkit_version": __version__, "command": args.command, "arguments": argv,
        "seed": args.seed, "profile": args.profile, "config": config,
        "inputs": digest(inputs), "outputs": digest(outputs)})


def _asdict(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}


# ---------------------------------------------------------------------------
# checkpoints: parameters (+ optional training state) and a .cfg sidecar
# ---------------------------------------------------------------------------

def config_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(ckpt.suffix + ".cfg")


def load_model(ckpt: Path) -> tuple[BeatTransformer, dict]:
    cfg_file = config_path(ckpt)
    if not cfg_file.is_file():
        raise CheckpointError(f"missing model config {cfg_file}")
    try:
        cfg = EncoderConfig.from_text(cfg_file.read_text())
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(f"{cfg_file}: {exc}") from exc
    arrays = load(ckpt)
    try:
        return BeatTransformer.from_arrays(cfg, arrays), arrays
    except ConfigError as exc:
        raise CheckpointError(f"{ckpt}: {exc}") from exc


def save_model(ckpt: Path, model: BeatTransformer, extra: dict | None = None) -> None:
    arrays = dict(model.state_arrays())
    arrays.update(extra or {})
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save(ckpt, arrays)
    config_path(ckpt).write_text(model.cfg.to_text())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, overrides) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    params = synth_params(overrides, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips, written = [], []
    for i in range(args.count):
        clip, ann = synth_clip(params, np.random.default_rng([args.seed, i]))
        stem = f"clip_{i:04d}"
        spec, beats = out / f"{stem}.bspc", out / f"{stem}.beats"
        bio.write_spectrogram(spec, clip)
        bio.write_annotation(beats, ann)
        written += [spec, beats]
        clips.append({"name": stem, "spectrogram": spec.name, "annotation": beats.name,
                      "spectrogram_sha256": bio.sha256_file(spec),
                      "annotation_sha256": bio.sha256_file(beats),
                      "frames": clip.n_frames, "beats_per_bar": ann.beats_per_bar,
                      "bpm": round(60.0 / float(np.diff(ann.beat_times).mean()), 6)
                      if ann.beat_times.size > 1 else None})
    bio.write_json(out / DATA_MANIFEST, {"seed": args.seed, "synth": _asdict(params), "clips": clips})
    write_run_manifest(out, args, {"synth": _asdict(params)}, outputs=written + [out / DATA_MANIFEST])
    log.info("wrote %d clips to %s", args.count, out)
    return EXIT_OK


def load_dataset(data_dir: Path):
    manifest = data_dir / DATA_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {DATA_MANIFEST} in {data_dir}")
    entries = bio.read_json(manifest)["clips"]
    data, inputs = [], [manifest]
    for e in entries:
        spec, ann = data_dir / e["spectrogram"], data_dir / e["annotation"]
        data.append((bio.read_spectrogram(spec), bio.read_annotation(ann)))
        inputs += [spec, ann]
    return data, inputs


def cmd_train_demo(args, overrides) -> int:
    data_dir, ckpt = Path(args.data), Path(args.out)
    data, inputs = load_dataset(data_dir)
    if not data:
        raise bio.FormatError(f"{data_dir} holds no clips")
    tcfg = train_config(args, overrides)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.resume:
        model, arrays = load_model(Path(args.resume))
        state = new_state(model, tcfg)
        if "train.epoch" not in arrays:
            raise CheckpointError(f"{args.resume} carries no training state")
        state.load(arrays)
        inputs.append(Path(args.resume))
    else:
        model = BeatTransformer(model_config(args, overrides), seed=args.seed)
        state = None
    loss_log = Path(args.loss_log) if args.loss_log else ckpt.with_suffix(".loss.tsv")

    def on_epoch(row, st):
        save_model(ckpt, model, st.arrays())
        lines = ["epoch\ttrain_loss\tval_loss\tlr"] + [
            f"{h['epoch']}\t{h['train_loss']:.10g}\t{h['val_loss']:.10g}\t{h['lr']:.6g}" for h in st.history]
        loss_log.write_text("\n".join(lines) + "\n")

    state = train_loop(model, data, tcfg, state, on_epoch)
    on_epoch(None, state)
    config = {"model": _asdict(model.cfg), "train": _asdict(tcfg)}
    write_run_manifest(ckpt.parent, args, config, inputs,
                       [ckpt, config_path(ckpt), loss_log])
    first, last = state.history[0]["train_loss"], state.history[-1]["train_loss"]
    log.info("training loss %.4f -> %.4f over %d epochs", first, last, state.epoch)
    return EXIT_OK


def cmd_decode(args, overrides) -> int:
    ckpt, clip_path, out = Path(args.checkpoint), Path(args.clip), Path(args.out)
    model, _ = load_model(ckpt)
    clip = bio.read_spectrogram(clip_path)
    if clip.n_bins != model.cfg.n_mels:
        raise ConfigError(f"clip has {clip.n_bins} mel bins, model expects {model.cfg.n_mels}")
    track = model.predict(clip)
    act_path = Path(args.activations) if args.activations else out.with_suffix(".bact")
    for d in {out.parent, act_path.parent}:
        d.mkdir(parents=True, exist_ok=True)
    bio.write_activations(act_path, track)
    cfg = dbn_config(overrides, clip.fps)
    beats = viterbi_decode(bio.read_activations(act_path), cfg)
    out.write_text(bio.format_beats(beats.times, beats.positions))
    write_run_manifest(out.parent, args, {"dbn": _asdict(cfg), "model": _asdict(model.cfg)},
                       [ckpt, config_path(ckpt), clip_path], [out, act_path])
    log.info("decoded %d beats", len(beats))
    return EXIT_OK


ORACLE_REPEATS = 3  # quadratic; each call at T=8192 takes seconds
M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3  # glibc mallopt parameters


def _time_ns(fn) -> int:
    t0 = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - t0


def _best_ns(fn, repeats: int) -> int:
    """Fastest of ``repeats`` calls after one warm-up."""
    fn()
    return min(_time_ns(fn) for _ in range(repeats))


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _pin_allocator() -> None:
    """Stop glibc from handing large blocks back to the OS between calls.

    Otherwise every call above a size threshold page-faults its buffers in
    again, which adds a step to the cost curve unrelated to the kernel.
    No-op where glibc's ``mallopt`` is unavailable.
    """
    name = ctypes.util.find_library("c")
    try:
        mallopt = ctypes.CDLL(name).mallopt if name else None
    except (OSError, AttributeError):
        mallopt = None
    if mallopt is not None:
        mallopt(M_TRIM_THRESHOLD, 1 << 30)
        mallopt(M_MMAP_THRESHOLD, 32 << 20)


def bench_dsa(T_list, d_f: int = 32, repeats: int = 5, seed: int = 0, oracle: bool = True,
              cfg: DSAConfig | None = None) -> list[dict]:
    """Kernel vs quadratic oracle: best-of-``repeats`` wall time, plus peak
    traced allocation of a single call.

    Kernel repeats cycle through all lengths in turn, so slow spells on a
    shared machine hit every length alike; each timed call directly follows
    an untimed one of the same length. The oracle runs afterwards, at most
    ORACLE_REPEATS times per length.
    """
    cfg = cfg or DSAConfig(m=2, n=2, r=1, d_f=d_f)
    _pin_allocator()
    kernels, refs = [], []
    for T in T_list:
        rng = np.random.default_rng([seed, T])
        args = tuple(rng.standard_normal((T, d_f)) for _ in range(3))
        kernels.append(lambda a=args: dsa_forward(*a, cfg))
        refs.append(lambda a=args: masked_reference_attention(*a, cfg))
    rows = [{"T": T, "kernel_ns": -1, "oracle_ns": -1, "kernel_peak_bytes": -1, "oracle_peak_bytes": -1}
            for T in T_list]
    with tn.no_grad():
        for k in kernels:
            k()
        best = [np.inf] * len(kernels)
        for _ in range(repeats):
            best = [min(b, _best_ns(k, 1)) for b, k in zip(best, kernels)]
        for row, k, b in zip(rows, kernels, best):
            row["kernel_ns"] = int(b)
            row["kernel_peak_bytes"] = _peak_bytes(k)
        if oracle:
            for row, ref in zip(rows, refs):
                row["oracle_ns"] = _best_ns(ref, min(repeats, ORACLE_REPEATS))
                row["oracle_peak_bytes"] = _peak_bytes(ref)
    return rows


BENCH_COLUMNS = ("T", "kernel_ns", "oracle_ns", "kernel_peak_bytes", "oracle_peak_bytes")


def cmd_bench_dsa(args, overrides) -> int:
    rows = bench_dsa(args.T, d_f=args.d_f, repeats=args.repeats, seed=args.seed,
                     oracle=not args.no_oracle)
    text = ",".join(BENCH_COLUMNS) + "\n" + "".join(
        ",".join(str(r[c]) for c in BENCH_COLUMNS) + "\n" for r in rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_run_manifest(out.parent, args, {"d_f": args.d_f, "T": args.T, "repeats": args.repeats},
                           outputs=[out])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_attention(args, overrides) -> int:
    ckpt, clip_path, out = Path(args.checkpoint), Path(args.clip), Path(args.out)
    model, _ = load_model(ckpt)
    clip = bio.read_spectrogram(clip_path)
    if clip.n_frames > MAX_FRAMES:
        raise MarkovError(f"clip has {clip.n_frames} frames; dense export is capped at {MAX_FRAMES}")
    bad = [L for L in args.L if not 1 <= L <= model.cfg.n_ttl]
    if bad:
        raise UsageError(f"L values {bad} outside 1..{model.cfg.n_ttl}")
    head = args.head if args.head == "avg" else int(args.head)
    attention = capture_attention(model, clip)
    layers = [layer_attention_matrix(l, clip, model, head, args.channel, attention)
              for l in range(max(args.L))]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for L in sorted(set(args.L)):
        P = multi_step_product(layers[:L])
        for fmt in ("csv", "pgm"):
            written.append(export_matrix(P, out / export_name(L, head, fmt), fmt))
    write_run_manifest(out, args, {"model": _asdict(model.cfg)}, [ckpt, config_path(ckpt), clip_path],
                       written)
    return EXIT_OK


def _score(pair) -> MetricReport:
    est_path, ref_path = pair
    et, ep = bio.parse_beats(Path(est_path).read_text(encoding="utf-8"))
    rt, rp = bio.parse_beats(Path(ref_path).read_text(encoding="utf-8"))
    return evaluate(et, ep, rt, rp)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def cmd_evaluate(args, overrides) -> int:
    est_dir, ref_dir = Path(args.est), Path(args.ref)
    if not ref_dir.is_dir():
        raise FileNotFoundError(f"reference directory {ref_dir} not found")
    est = {p.stem: p for p in sorted(est_dir.glob(f"*{args.suffix}"))} if est_dir.is_dir() else {}
    ref = {p.stem: p for p in sorted(ref_dir.glob(f"*{args.suffix}"))}
    if not est:
        log.warning("no estimate files in %s", est_dir)
    for stem in sorted(set(est) ^ set(ref)):
        log.warning("skipping %s: no %s file", stem, "reference" if stem in est else "estimate")
    stems = sorted(set(est) & set(ref))
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        reports = list(pool.map(_score, [(est[s], ref[s]) for s in stems]))
    lines = ["track\t" + "\t".join(MetricReport.COLUMNS)]
    lines += [s + "\t" + "\t".join(_fmt(v) for v in r.values()) for s, r in zip(stems, reports)]
    table = np.array([r.values() for r in reports], dtype=float).reshape(-1, len(MetricReport.COLUMNS))
    means = [float("nan") if np.isnan(col).all() else float(np.nanmean(col)) for col in table.T]
    lines.append("MEAN\t" + "\t".join(_fmt(float(v)) for v in means))
    text = "\n".join(lines) + "\n"
    inputs = [est[s] for s in stems] + [ref[s] for s in stems]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_run_manifest(out.parent, args, {"tracks": stems}, inputs, [out])
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override model.*, train.*, dbn.* or synth.* settings; bare keys are model keys")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="beatkit", description=__doc__.split("\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"beatkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic clips + annotations")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--frames", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-demo", parents=[common], help="train the encoder on a generated set")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path (BTCK)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint with training state to continue from")
    p.add_argument("--loss-log", default=None, help="TSV loss log (default: <out>.loss.tsv)")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("decode", parents=[common], help="activations + DBN beats for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="BSPC spectrogram file")
    p.add_argument("--out", required=True, help="beats file (annotation text format)")
    p.add_argument("--activations", default=None, help="BACT output (default: <out>.bact)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench-dsa", parents=[common], help="time the DSA kernel against the quadratic oracle")
    p.add_argument("--T", type=_int_list, default=[1024, 2048, 4096, 8192])
    p.add_argument("--d-f", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench_dsa)

    p = sub.add_parser("export-attention", parents=[common], help="write L-step attention products")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--L", type=_int_list, default=[1, 3, 5, 9])
    p.add_argument("--head", default="avg", help="head index or 'avg'")
    p.add_argument("--channel", default="drum")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("evaluate", parents=[common], help="F-measure / CMLt / AMLt over two directories")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--suffix", default=".beats")
    p.add_argument("--out", default=None, help="TSV path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)
    return parser


DATA_ERRORS = (OSError, bio.FormatError, CheckpointError, AnnotationError, MarkovError,
               ConfigError, DBNConfigError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = split_overrides(args.overrides)
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"beatkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"beatkit: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DATA_ERRORS as exc:
        print(f"beatkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
