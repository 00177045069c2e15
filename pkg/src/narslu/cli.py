"""Command-line entry point: ``narslu <subcommand>``.

Subcommands: synth-data, train, decode, eval, bench. Every option can be set
in an INI-style configuration file (``--config``); a flag given on the
command line overrides the file. Exit codes: 0 success, 1 usage or invalid
configuration, 2 I/O or input-data problems, 3 numeric failure.

Configuration sections and keys (all optional)::

    [run]     kind, preset, seed, data_dir, out_dir
    [model]   d_model, heads, ff_dim, kernel, layers, dec_layers, dropout, taps, tap_thresholds
    [loss]    lam, eta, gamma, mu, ar_ctc
    [train]   epochs, batch_size, lr, decode_dev, dev_limit, max_seconds
    [decode]  p_thresh, tap_thresholds, max_iterations, beam, ctc_weight
    [synth]   n_train, n_dev, n_test, world_seed and any SynthConfig field

Tuple values (``taps``, ``tap_thresholds``) are comma separated.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plotting
from .data import (JointVocabulary, SynthConfig, SynthWorld, Utterance, read_features, read_jsonl,
                   utterance_record, write_features, write_jsonl)
from .data.corpus import record_to_utterance
from .infer import RefinementConfig, decode_dataset, output_record
from .metrics import EvalReport, audio_seconds, evaluate, rtf
from .models import KINDS, PRESETS, build_model, load_model, preset
from .numerics.tensor import NumericError
from .train import LossWeights, TrainConfig, TrainingDivergedError, load_training_checkpoint, train

log = logging.getLogger("narslu")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "dev", "test")

# training epochs per preset and model kind (the larger preset follows the reference recipe)
PRESET_EPOCHS = {"desk": {"mask-ctc": 60, "sc-mask-ctc": 60, "ar": 25},
                 "paper-slurp": {"mask-ctc": 400, "sc-mask-ctc": 400, "ar": 100}}
PRESET_DECODE = {"desk": {}, "paper-slurp": {"tap_thresholds": (0.9, 0.99, 0.999)}}
MODEL_KEYS = ("d_model", "heads", "ff_dim", "kernel", "layers", "dec_layers", "dropout", "taps",
              "tap_thresholds", "max_frames", "max_tokens")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ run config
@dataclass
class SplitSizes:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200


@dataclass
class RunConfig:
    kind: str = "mask-ctc"
    preset: str = "desk"
    seed: int = 0
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    model: dict = field(default_factory=dict)  # preset overrides
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    splits: SplitSizes = field(default_factory=SplitSizes)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise CliError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.preset not in PRESETS:
            raise CliError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        try:
            self.train.validate()
            self.synth.validate()
        except ValueError as err:
            raise CliError(str(err)) from err
        if min(asdict(self.splits).values()) < 1:
            raise CliError("every split needs at least one utterance")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "preset": self.preset, "seed": self.seed, "data_dir": self.data_dir,
             "out_dir": self.out_dir, "model": {k: list(v) if isinstance(v, tuple) else v
                                                for k, v in self.model.items()}}
        d["loss"] = asdict(self.weights)
        d["train"] = {k: v for k, v in asdict(self.train).items() if k not in ("weights", "refinement")}
        d["decode"] = asdict(self.refinement)
        d["synth"] = {**asdict(self.synth), **asdict(self.splits)}
        return d


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)
    return parse


def _converter(name: str, default):
    if name in ("taps",):
        return _ints
    if name in ("tap_thresholds",):
        return _optional(_floats)
    if name in ("dev_limit",):
        return _optional(int)
    if name in ("max_seconds",):
        return _optional(float)
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _set_fields(obj, values: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    for key, raw in values.items():
        if key not in known:
            raise CliError(f"unknown key {key!r} in [{section}]")
        try:
            setattr(obj, key, _converter(key, known[key])(raw))
        except ValueError as err:
            raise CliError(f"[{section}] {key}: {err}") from err


def _model_value(key: str, raw):
    if key == "taps":
        return _ints(raw)
    if key == "tap_thresholds":
        return _floats(raw)
    if key == "dropout":
        return float(raw)
    return int(raw)


def load_run_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Config file first, then command-line ``overrides`` (``section.key`` -> value, None = unset)."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise CliError(f"cannot read config {path}: {err}", EXIT_IO) from err
        except configparser.Error as err:
            raise CliError(f"malformed config {path}: {err}") from err
    values: dict[str, dict] = {s: dict(parser[s]) for s in parser.sections()}
    unknown = set(values) - {"run", "model", "loss", "train", "decode", "synth"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    for dotted, value in overrides.items():
        if value is not None:
            section, key = dotted.split(".", 1)
            values.setdefault(section, {})[key] = value

    run = values.get("run", {})
    cfg = RunConfig()
    _set_fields_run(cfg, run)
    try:
        cfg.model = {k: _model_value(k, v) for k, v in values.get("model", {}).items()}
    except ValueError as err:
        raise CliError(f"[model] {err}") from err
    bad = set(cfg.model) - set(MODEL_KEYS)
    if bad:
        raise CliError(f"unknown key(s) in [model]: {sorted(bad)}")
    _set_fields(cfg.weights, values.get("loss", {}), "loss")
    if cfg.preset in PRESET_EPOCHS:
        cfg.train.epochs = PRESET_EPOCHS[cfg.preset].get(cfg.kind, cfg.train.epochs)
        for key, value in PRESET_DECODE[cfg.preset].items():
            setattr(cfg.refinement, key, value)
    _set_fields(cfg.train, values.get("train", {}), "train")
    cfg.train.seed = cfg.seed
    cfg.train.weights = cfg.weights
    _set_fields(cfg.refinement, values.get("decode", {}), "decode")
    cfg.train.refinement = cfg.refinement
    synth = dict(values.get("synth", {}))
    split_keys = {k: synth.pop(k) for k in list(synth) if k in ("n_train", "n_dev", "n_test")}
    _set_fields(cfg.splits, split_keys, "synth")
    synth.setdefault("world_seed", cfg.seed)
    synth.setdefault("n_utterances", cfg.splits.n_train)
    _set_fields(cfg.synth, synth, "synth")
    cfg.validate()
    return cfg


def _set_fields_run(cfg: RunConfig, run: dict) -> None:
    for key, raw in run.items():
        if key == "seed":
            try:
                cfg.seed = int(raw)
            except ValueError as err:
                raise CliError(f"[run] seed: {err}") from err
        elif key in ("kind", "preset"):
            setattr(cfg, key, str(raw))
        elif key in ("data_dir", "out_dir"):
            setattr(cfg, key, None if raw is None else str(raw))
        else:
            raise CliError(f"unknown key {key!r} in [run]")


# ------------------------------------------------------------------ dataset files
def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(out_dir: Path, cfg: RunConfig) -> dict:
    """Generate the train/dev/test splits, vocabulary and a checksummed manifest."""
    world = SynthWorld.build(cfg.synth)
    sizes = {"train": cfg.splits.n_train, "dev": cfg.splits.n_dev, "test": cfg.splits.n_test}
    out_dir.mkdir(parents=True, exist_ok=True)
    world.vocab.save(out_dir / "vocab.json")
    files = [out_dir / "vocab.json"]
    for offset, split in enumerate(SPLITS):
        utts = world.generate(cfg.seed + offset, n=sizes[split], prefix=f"{split}-")
        feat_dir = out_dir / "features" / split
        feat_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for u in utts:
            rel = Path("features") / split / f"{u.id}.narf"
            write_features(out_dir / rel, u.features)
            files.append(out_dir / rel)
            rec = utterance_record(u, world.vocab)
            rec.update(slots=[world.vocab.symbol(s) for s in u.slots], features=rel.as_posix(),
                       num_frames=u.num_frames)
            records.append(rec)
        write_jsonl(out_dir / f"{split}.jsonl", records)
        files.append(out_dir / f"{split}.jsonl")
    manifest = {
        "seed": cfg.seed,
        "synth": cfg.synth.to_dict(),
        "splits": {s: {"utterances": sizes[s], "annotations": f"{s}.jsonl", "seed": cfg.seed + i}
                   for i, s in enumerate(SPLITS)},
        "vocab_size": len(world.vocab),
        "checksums": {p.relative_to(out_dir).as_posix(): sha256_file(p) for p in sorted(files)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir: Path, split: str, vocab: JointVocabulary) -> list[Utterance]:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise CliError(f"missing annotation file {path}", EXIT_IO)
    utts = []
    for rec in read_jsonl(path):
        if "slots" in rec:
            words = rec["transcript"].split()
            utt = Utterance(id=rec["id"], tokens=[vocab.id(w) for w in words], intent=vocab.intent_id(rec["intent"]),
                            slots=[vocab.id(t) for t in rec["slots"]], text=rec["transcript"])
        else:
            utt = record_to_utterance(rec, vocab)
        try:
            utt.features = read_features(data_dir / rec["features"])
        except ValueError as err:
            raise CliError(f"{rec['features']}: {err}", EXIT_IO) from err
        utts.append(utt)
    return utts


def load_vocab(data_dir: Path) -> JointVocabulary:
    path = data_dir / "vocab.json"
    if not path.exists():
        raise CliError(f"missing vocabulary {path} (run synth-data first)", EXIT_IO)
    return JointVocabulary.load(path)


def _require(value: Optional[str], what: str) -> Path:
    if not value:
        raise CliError(f"{what} not set (flag or config file)")
    return Path(value)


# ------------------------------------------------------------------ subcommands
def cmd_synth_data(cfg: RunConfig, args) -> int:
    out = _require(cfg.data_dir, "--data-dir")
    manifest = write_dataset(out, cfg)
    sizes = " / ".join(str(manifest["splits"][s]["utterances"]) for s in SPLITS)
    print(f"wrote {out} ({sizes} utterances, |V| = {manifest['vocab_size']})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = _require(cfg.data_dir, "--data-dir")
    out = _require(cfg.out_dir, "--out-dir")
    vocab = load_vocab(data)
    train_set, dev_set = load_split(data, "train", vocab), load_split(data, "dev", vocab)
    state = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.exists():
            raise CliError(f"checkpoint {ckpt} not found", EXIT_IO)
        model, state = load_training_checkpoint(ckpt)
        log.info("resuming from %s at epoch %d", ckpt, state.epoch)
    else:
        try:
            mcfg = preset(cfg.preset, cfg.kind, len(vocab), train_set[0].features.shape[1], **cfg.model)
        except ValueError as err:
            raise CliError(str(err)) from err
        model = build_model(mcfg, vocab, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    start = time.perf_counter()

    def report(rec):
        metrics = " ".join(f"{k}={rec[k]:.2f}" for k in ("dev_wer", "dev_ic_acc", "dev_slu_f1") if k in rec)
        print(f"epoch {rec['epoch']:3d} loss {rec['losses']['loss']:.4f} dev_loss {rec['dev_loss']:.4f} "
              f"{metrics} ({time.perf_counter() - start:.0f}s)", flush=True)

    try:
        state = train(model, train_set, dev_set, cfg.train, out_dir=out, state=state, on_epoch=report)
    except TrainingDivergedError as err:
        print(f"error: training diverged: {err} (snapshot in {out / 'nan_snapshot.ckpt'})", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {"kind": model.kind, "epochs": state.epoch, "best_epoch": state.best_epoch,
               "best_dev_loss": state.best_metric}
    if state.history:
        summary["final"] = {k: v for k, v in state.history[-1].items() if k != "wall_time"}
        plotting.training_curves(state.history, out / "training_curves.png", title=model.kind)
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"trained {state.epoch} epochs; best dev loss {state.best_metric} at epoch {state.best_epoch}")
    return EXIT_OK


def _load_checkpoint(path: Optional[str]):
    ckpt = _require(path, "--checkpoint")
    if not ckpt.exists():
        raise CliError(f"checkpoint {ckpt} not found", EXIT_IO)
    model, _, _ = load_model(ckpt)
    return model


def _refinement_for(model, base: RefinementConfig) -> RefinementConfig:
    ref = RefinementConfig(**asdict(base))
    if ref.tap_thresholds is not None and len(ref.tap_thresholds) != len(model.config.encoder.taps):
        # thresholds configured for another tap layout: fall back to the model's own
        ref.tap_thresholds = None
    try:
        ref.validate()
    except ValueError as err:
        raise CliError(str(err)) from err
    return ref


def timed_decode(model, utts: Sequence[Utterance], ref: RefinementConfig) -> tuple[list[dict], float, float]:
    """Single-worker decode. Returns (records, total decode seconds, audio seconds)."""
    outs, times = decode_dataset(utts, model, ref)
    records = [output_record(u.id, o, model.vocab, wall_time=t) for u, o, t in zip(utts, outs, times)]
    return records, float(sum(times)), audio_seconds(sum(u.num_frames for u in utts))


def cmd_decode(cfg: RunConfig, args) -> int:
    data = _require(cfg.data_dir, "--data-dir")
    model = _load_checkpoint(args.checkpoint)
    utts = load_split(data, args.split, model.vocab)
    if args.limit:
        utts = utts[:args.limit]
    ref = _refinement_for(model, cfg.refinement)
    records, seconds, audio = timed_decode(model, utts, ref)
    if args.no_timing:
        for r in records:
            r.pop("wall_time", None)
    out = Path(args.output) if args.output else _require(cfg.out_dir, "--out-dir") / f"decode_{args.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, records)
    iters = [r["iterations"] for r in records]
    print(f"decoded {len(records)} utterances ({model.kind}) in {seconds:.3f}s; audio {audio:.2f}s; "
          f"RTF {rtf(seconds, audio):.4f}; avg iterations {np.mean(iters):.2f} -> {out}")
    return EXIT_OK


def _references(path: Path) -> dict[str, dict]:
    if not path.exists():
        raise CliError(f"missing reference file {path}", EXIT_IO)
    return {r["id"]: r for r in read_jsonl(path)}


def align_records(refs: dict[str, dict], hyps: list[dict]) -> tuple[list[dict], list[dict]]:
    """Pair hypotheses with references by id; any id present on one side only is an error."""
    hyp_ids = {h["id"] for h in hyps}
    missing = sorted(set(refs) - hyp_ids)
    extra = sorted(hyp_ids - set(refs))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"no decode for {len(missing)} reference id(s): {', '.join(missing[:20])}")
        if extra:
            parts.append(f"{len(extra)} decoded id(s) not in references: {', '.join(extra[:20])}")
        raise CliError("; ".join(parts), EXIT_IO)
    ordered = sorted(hyps, key=lambda h: h["id"])
    return [refs[h["id"]] for h in ordered], ordered


def evaluate_files(decodes: Path, references: Path) -> tuple[EvalReport, list[dict]]:
    if not decodes.exists():
        raise CliError(f"missing decode file {decodes}", EXIT_IO)
    refs, hyps = align_records(_references(references), read_jsonl(decodes))
    wall = None
    audio = None
    if hyps and all("wall_time" in h for h in hyps) and all("num_frames" in r for r in refs):
        wall = sum(h["wall_time"] for h in hyps)
        audio = audio_seconds(sum(r["num_frames"] for r in refs))
    return evaluate(refs, hyps, wall, audio), hyps


def write_report(report: EvalReport, out_dir: Path, stem: str, iterations=None, title=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(report.to_json() + "\n")
    (out_dir / f"{stem}.tsv").write_text(report.table() + "\n")
    plotting.eval_figure(asdict(report), out_dir / f"{stem}.png", iterations=iterations, title=title)


def cmd_eval(cfg: RunConfig, args) -> int:
    references = Path(args.references) if args.references else \
        _require(cfg.data_dir, "--data-dir or --references") / f"{args.split}.jsonl"
    report, hyps = evaluate_files(Path(args.decodes), references)
    out = Path(cfg.out_dir or Path(args.decodes).parent)
    iters = [h["iterations"] for h in hyps if h.get("iterations") is not None] or None
    write_report(report, out, args.stem, iterations=iters, title=Path(args.decodes).name)
    print(report.table())
    if report.avg_iterations is not None:
        print(f"average refinement iterations {report.avg_iterations:.2f} (reference value 2.5)")
    print(f"report written to {out / args.stem}.{{json,tsv,png}}")
    return EXIT_OK


def encoder_scale(model) -> dict:
    enc = asdict(model.config.encoder)
    enc.pop("taps")
    return enc


def bench(ar_model, nar_model, utts: Sequence[Utterance], ref: RefinementConfig) -> dict:
    """Decode the same utterances with both systems on this worker; report both RTFs and the ratio."""
    if encoder_scale(ar_model) != encoder_scale(nar_model):
        raise CliError("AR and NAR checkpoints differ in encoder scale; the comparison would be unfair")
    result = {"utterances": len(utts), "beam": ref.beam}
    for name, model in (("ar", ar_model), ("nar", nar_model)):
        records, seconds, audio = timed_decode(model, utts, _refinement_for(model, ref))
        result[name] = {"kind": model.kind, "decode_seconds": seconds, "audio_seconds": audio,
                        "rtf": rtf(seconds, audio),
                        "avg_iterations": float(np.mean([r["iterations"] for r in records]))}
    result["speedup"] = result["ar"]["rtf"] / result["nar"]["rtf"]
    return result


def cmd_bench(cfg: RunConfig, args) -> int:
    data = _require(cfg.data_dir, "--data-dir")
    ar_model, nar_model = _load_checkpoint(args.ar_checkpoint), _load_checkpoint(args.nar_checkpoint)
    if ar_model.kind != "ar" or nar_model.kind == "ar":
        raise CliError("--ar-checkpoint must hold an AR model and --nar-checkpoint a NAR model")
    utts = load_split(data, args.split, nar_model.vocab)
    if args.limit:
        utts = utts[:args.limit]
    result = bench(ar_model, nar_model, utts, cfg.refinement)
    out = _require(cfg.out_dir, "--out-dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    rows = ["system\tkind\tdecode_seconds\taudio_seconds\tRTF"]
    rows += [f"{k}\t{result[k]['kind']}\t{result[k]['decode_seconds']:.4f}\t{result[k]['audio_seconds']:.2f}\t"
             f"{result[k]['rtf']:.5f}" for k in ("ar", "nar")]
    (out / "bench.tsv").write_text("\n".join(rows) + f"\nspeedup\t{result['speedup']:.3f}\n")
    plotting.rtf_figure({f"AR (beam {result['beam']})": result["ar"]["rtf"],
                         result["nar"]["kind"]: result["nar"]["rtf"]}, out / "rtf.png")
    print(f"RTF ar = {result['ar']['rtf']:.5f}, RTF nar = {result['nar']['rtf']:.5f}, "
          f"speedup = {result['ar']['rtf']:.5f} / {result['nar']['rtf']:.5f} = {result['speedup']:.2f}x")
    return EXIT_OK


# ------------------------------------------------------------------ argument parsing
class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 rather than argparse's default 2 (reserved for I/O)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, dest="run.seed")
    common.add_argument("--data-dir", dest="run.data_dir")
    common.add_argument("--out-dir", dest="run.out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--kind", dest="run.kind", help=f"one of {', '.join(KINDS)}")
    model.add_argument("--preset", dest="run.preset", help=f"one of {', '.join(PRESETS)}")

    dec = _Parser(add_help=False)
    dec.add_argument("--p-thresh", type=float, dest="decode.p_thresh")
    dec.add_argument("--tap-thresholds", dest="decode.tap_thresholds", help="comma separated")
    dec.add_argument("--max-iterations", type=int, dest="decode.max_iterations")
    dec.add_argument("--beam", type=int, dest="decode.beam")
    dec.add_argument("--ctc-weight", type=float, dest="decode.ctc_weight")

    parser = _Parser(prog="narslu", description="Non-autoregressive joint ASR + SLU toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--n-train", type=int, dest="synth.n_train")
    p.add_argument("--n-dev", type=int, dest="synth.n_dev")
    p.add_argument("--n-test", type=int, dest="synth.n_test")
    p.add_argument("--world-seed", type=int, dest="synth.world_seed")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common, model, dec], help="train a model")
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--dev-limit", type=int, dest="train.dev_limit")
    p.add_argument("--max-seconds", type=float, dest="train.max_seconds")
    p.add_argument("--no-dev-decode", action="store_const", const="false", dest="train.decode_dev")
    p.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common, dec], help="decode a split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--output", help="decode JSON-lines path (default <out-dir>/decode_<split>.jsonl)")
    p.add_argument("--limit", type=int, help="decode only the first N utterances")
    p.add_argument("--no-timing", action="store_true", help="omit wall_time fields (byte-stable output)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="score a decode file against references")
    p.add_argument("--decodes", required=True)
    p.add_argument("--references", help="reference JSON-lines (default <data-dir>/<split>.jsonl)")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--stem", default="report", help="output file stem")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common, dec], help="compare AR and NAR real-time factors")
    p.add_argument("--ar-checkpoint", required=True)
    p.add_argument("--nar-checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def _overrides(args) -> dict:
    return {k: v for k, v in vars(args).items() if "." in k}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, _overrides(args))
        return args.func(cfg, args)
    except CliError as err:
        print(f"narslu {args.command}: error: {err}", file=sys.stderr)
        return err.code
    except (NumericError, FloatingPointError) as err:
        print(f"narslu {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError, json.JSONDecodeError) as err:
        print(f"narslu {args.command}: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"narslu {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
