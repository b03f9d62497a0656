"""Command-line entry point: synthesize, train, decode and evaluate.

Every command reads optional defaults from a JSON config file (``--config``
or the ``STREAMSCD_CONFIG`` environment variable); explicit flags win.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoder import FRAME_SHIFT_S, PRESETS
from .evaluation import (
    ScoredSample,
    SweepRow,
    evaluate_events,
    gender_accuracy,
    threshold_sweep,
    write_reports,
)
from .nn import load_checkpoint, save_checkpoint
from .pipeline import decode_offline, decode_streaming
from .scd import ProfileBank, SCDConfig
from .synth import TEST_PRESET, ReferenceAnnotation, SynthConfig, SynthDataset, synth_dataset
from .training import (
    TrainConfig,
    build_profiles,
    file_digest,
    make_optimizer,
    new_st_model,
    new_tvector_model,
    oracle_sid,
    train_st,
    train_tvectors,
    tvector_examples,
)
from .transducer import NumericError, STModel, VocabularyError
from .tvector import TVectorModel

log = logging.getLogger("streamscd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ENV = "STREAMSCD_CONFIG"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def resolve(args: argparse.Namespace, config: dict, defaults: dict) -> dict:
    """Flag value if given, else config value, else default."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


# ---------------------------------------------------------------------------
# commands

SYNTH_DEFAULTS = dict(
    preset="small", n_samples=None, min_speakers=None, max_speakers=None, n_recordings=None,
    mean_duration=None, min_segment=None, sid_noise=None, feature_noise=None, max_pair_cos=None, speaker_pool=None, seed=None,
)


def cmd_synth(args, config) -> int:
    o = resolve(args, config, SYNTH_DEFAULTS)
    base = TEST_PRESET if o["preset"] == "test-688" else SynthConfig()
    fields = asdict(base)
    for key, name in [("n_samples", "n_samples"), ("n_recordings", "n_recordings"), ("mean_duration", "mean_duration_s"), ("min_segment", "min_segment_s"), ("speaker_pool", "speaker_pool"),
                      ("sid_noise", "sid_noise"), ("feature_noise", "feature_noise"), ("max_pair_cos", "max_pair_cos"), ("seed", "seed")]:
        if o[key] is not None:
            fields[name] = o[key]
    lo, hi = fields["n_speakers"]
    fields["n_speakers"] = (o["min_speakers"] or lo, o["max_speakers"] or hi)
    if fields["n_samples"] < 1:
        raise UsageError("n_samples must be >= 1")
    try:
        cfg = SynthConfig(**fields)
    except ValueError as e:
        raise UsageError(str(e)) from e
    ds = synth_dataset(cfg)
    try:
        ds.write(args.out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from e
    log.info("wrote %d samples to %s", len(ds), args.out)
    return EXIT_OK


def _read_dataset(path) -> SynthDataset:
    try:
        return SynthDataset.read(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e


def _loss_logger(path: Path):
    fh = open(path, "w", encoding="utf-8")
    fh.write("step\tloss\n")

    def cb(step, loss):
        fh.write(f"{step}\t{loss!r}\n")
        fh.flush()
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    return fh, cb


TRAIN_DEFAULTS = dict(steps=1500, lr=3e-3, batch=8, seed=0)


def cmd_train_st(args, config) -> int:
    o = resolve(args, config, dict(TRAIN_DEFAULTS, steps=2000, preset="toy"))
    if o["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {o['preset']!r}; choose from {sorted(PRESETS)}")
    ds = _read_dataset(args.data)
    cfg = TrainConfig(o["steps"], o["lr"], o["batch"], seed=o["seed"])
    if args.resume:
        model = _load_st(args.resume)
        opt = _load_optimizer(args.resume, model.params, cfg)
    else:
        model = new_st_model(ds, o["preset"], o["seed"])
        opt = make_optimizer(model.params, cfg)
    out = Path(args.out)
    fh, cb = _loss_logger(out.with_suffix(".loss.tsv"))
    with fh:
        train_st(model, ds, cfg, cb, opt)
    model.save(out)
    save_checkpoint(_optimizer_path(out), opt.state_dict())
    return EXIT_OK


def _optimizer_path(stem) -> Path:
    return Path(stem).with_suffix(".opt.nnc")


def _load_optimizer(stem, params, cfg: TrainConfig):
    opt = make_optimizer(params, cfg)
    try:
        opt.load_state_dict(load_checkpoint(_optimizer_path(stem)))
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot resume from {stem}: {e}") from e
    return opt


def _load_st(stem) -> STModel:
    try:
        return STModel.load(stem)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load ST model {stem}: {e}") from e


def cmd_train_tvector(args, config) -> int:
    o = resolve(args, config, dict(TRAIN_DEFAULTS, sid_window=12))
    ds = _read_dataset(args.data)
    st = _load_st(args.st)
    before = file_digest(Path(args.st).with_suffix(".nnc"))
    examples = tvector_examples(st, ds, o["sid_window"], o["seed"])
    cfg = TrainConfig(o["steps"], o["lr"], o["batch"], seed=o["seed"])
    if args.resume:
        try:
            model = TVectorModel.load(args.resume, st)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load t-vector model {args.resume}: {e}") from e
        opt = _load_optimizer(args.resume, model.params, cfg)
    else:
        model = new_tvector_model(st, ds, o["seed"])
        opt = make_optimizer(model.params, cfg)
    out = Path(args.out)
    fh, cb = _loss_logger(out.with_suffix(".loss.tsv"))
    with fh:
        train_tvectors(model, examples, cfg, cb, opt)
    model.save(out)
    save_checkpoint(_optimizer_path(out), opt.state_dict())
    profiles = Path(args.profiles_out) if args.profiles_out else out.with_suffix(".profiles.json")
    build_profiles(model, ds, examples).save(profiles)
    if file_digest(Path(args.st).with_suffix(".nnc")) != before:
        raise NumericError("ST checkpoint changed during t-vector training")
    return EXIT_OK


DECODE_DEFAULTS = dict(threshold=0.94, min_gap=1.0, gender_mode="max", profiles=None, beam=1, sid_window=12, sid_noise=None, seed=0, lang=None)


def cmd_decode(args, config) -> int:
    o = resolve(args, config, DECODE_DEFAULTS)
    ds = _read_dataset(args.data)
    st = _load_st(args.st)
    try:
        tv = TVectorModel.load(args.tvector, st)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load t-vector model {args.tvector}: {e}") from e
    try:
        bank = ProfileBank.load(o["profiles"]) if o["profiles"] else None
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load profiles {o['profiles']}: {e}") from e
    if o["gender_mode"] not in ("max", "centroid"):
        raise UsageError("gender mode must be max or centroid")
    scd = SCDConfig(o["threshold"], o["min_gap"], ds.config.frame_shift_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    decode = decode_offline if args.full else decode_streaming
    shift = ds.config.frame_shift_s
    with open(out / "hyps.jsonl", "w", encoding="utf-8") as hyps, open(out / "events.jsonl", "w", encoding="utf-8") as events:
        for s in ds:
            lang = o["lang"] or s.lang
            try:
                lid = st.vocab.lid(lang)
            except VocabularyError as e:
                raise DataError(str(e)) from e
            sid = oracle_sid(ds, s, o["sid_noise"], o["sid_window"], o["seed"])
            r = decode(st, tv, s.features, sid, lid, scd, bank, o["gender_mode"], o["beam"])
            tr = r.transcript(st)
            (out / f"{s.sample_id}.txt").write_text(tr.to_text(), encoding="utf-8")
            (out / f"{s.sample_id}.gender.json").write_text(json.dumps(tr.gender_sidecar()))
            with open(out / f"{s.sample_id}.tvec.jsonl", "w", encoding="utf-8") as fh:
                for t in r.tvectors:
                    fh.write(json.dumps(t.to_json(st.vocab.tokens[t.token], shift)) + "\n")
            hyps.write(json.dumps(r.hypothesis.to_json(st.vocab, shift, sample_id=s.sample_id)) + "\n")
            events.write(json.dumps({"sample_id": s.sample_id, "threshold": scd.threshold, "min_gap_s": scd.min_gap_s, "events": [e.to_json() for e in r.events]}) + "\n")
    return EXIT_OK


def _read_jsonl(path) -> list[dict]:
    try:
        return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e


def _read_refs(path) -> dict[str, ReferenceAnnotation]:
    return {r["sample_id"]: ReferenceAnnotation.from_json(r) for r in _read_jsonl(path)}


def _check_ids(hyp_ids, ref_ids) -> None:
    if set(hyp_ids) != set(ref_ids):
        diff = sorted(set(hyp_ids) ^ set(ref_ids))
        raise DataError(f"sample ids differ between hypotheses and references: {diff[:5]}")


def _write_rows(rows: list[SweepRow], stem) -> None:
    tsv, js = write_reports(rows, stem)
    sys.stdout.write(tsv.read_text())


def cmd_evaluate_scd(args, config) -> int:
    o = resolve(args, config, dict(tolerance=2.0))
    refs = _read_refs(args.ref)
    recs = _read_jsonl(Path(args.hyp) / "events.jsonl")
    hyp = {r["sample_id"]: [e["timestamp_s"] for e in r["events"]] for r in recs}
    _check_ids(hyp, refs)
    m, c = evaluate_events(hyp, {k: r.sc_times_s for k, r in refs.items()}, o["tolerance"])
    th = recs[0]["threshold"] if recs else float("nan")
    _write_rows([SweepRow(th, m.recall, m.precision, m.f1, c.matches, c.n_hyp, c.n_ref)], args.report)
    return EXIT_OK


def _scored_samples(hyp_dir: Path, refs: dict[str, ReferenceAnnotation]) -> list[ScoredSample]:
    hyps = _read_jsonl(hyp_dir / "hyps.jsonl")
    _check_ids([h["sample_id"] for h in hyps], refs)
    out = []
    for h in hyps:
        sid = h["sample_id"]
        tv = _read_jsonl(hyp_dir / f"{sid}.tvec.jsonl")
        vecs = np.asarray([t["tvec"] for t in tv], dtype=float).reshape(len(tv), -1) if tv else np.zeros((0, 0))
        out.append(ScoredSample(sid, vecs, [t["frame_index"] for t in tv], refs[sid].sc_times_s))
    return out


def cmd_sweep(args, config) -> int:
    o = resolve(args, config, dict(tolerance=2.0, min_gap=0.0, thresholds="0.89,0.94,0.99"))
    try:
        ths = [float(x) for x in str(o["thresholds"]).split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad threshold list: {e}") from e
    if not ths:
        raise UsageError("threshold list is empty")
    refs = _read_refs(args.ref)
    samples = _scored_samples(Path(args.hyp), refs)
    rows = threshold_sweep(samples, ths, o["tolerance"], o["min_gap"], FRAME_SHIFT_S)
    _write_rows(rows, args.report)
    return EXIT_OK


def cmd_evaluate_gender(args, config) -> int:
    refs = _read_refs(args.ref)
    hyp_dir = Path(args.hyp)
    hyps = _read_jsonl(hyp_dir / "hyps.jsonl")
    _check_ids([h["sample_id"] for h in hyps], refs)
    h_lab, r_lab = [], []
    for h in hyps:
        sidecar = json.loads((hyp_dir / f"{h['sample_id']}.gender.json").read_text())
        if len(sidecar) != len(h["tokens"]):
            raise DataError(f"{h['sample_id']}: gender sidecar has {len(sidecar)} entries for {len(h['tokens'])} tokens")
        ref = refs[h["sample_id"]]
        for tag, ts in zip(sidecar, h["timestamps_s"]):
            h_lab.append(tag["gender"])
            r_lab.append(ref.gender_at(ts))
    if not h_lab:
        raise DataError("no tokens to score")
    acc = gender_accuracy(h_lab, r_lab)
    report = {"accuracy": acc, "tokens": len(h_lab)}
    Path(args.report).with_suffix(".json").write_text(json.dumps(report, indent=2))
    Path(args.report).with_suffix(".tsv").write_text(f"accuracy\ttokens\n{acc!r}\t{len(h_lab)}\n")
    sys.stdout.write(f"accuracy\t{acc:.4f}\ttokens\t{len(h_lab)}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamscd", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic conversation dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=["small", "test-688"])
    s.add_argument("--n-samples", type=int)
    s.add_argument("--min-speakers", type=int)
    s.add_argument("--max-speakers", type=int)
    s.add_argument("--n-recordings", type=int)
    s.add_argument("--mean-duration", type=float)
    s.add_argument("--min-segment", type=float)
    s.add_argument("--speaker-pool", type=int, help="draw every sample from one fixed pool of this many speakers")
    s.add_argument("--sid-noise", type=float)
    s.add_argument("--feature-noise", type=float)
    s.add_argument("--max-pair-cos", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in [("train-st", cmd_train_st, "train the streaming translation model"),
                              ("train-tvector", cmd_train_tvector, "train the t-vector model on a frozen ST model")]:
        t = sub.add_parser(name, help=help_)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True, help="checkpoint stem")
        t.add_argument("--steps", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--resume", help="checkpoint stem of an earlier run to continue; --steps counts from its start")
        if name == "train-st":
            t.add_argument("--preset", choices=sorted(PRESETS))
        else:
            t.add_argument("--st", required=True, help="frozen ST checkpoint stem")
            t.add_argument("--sid-window", type=int)
            t.add_argument("--profiles-out")
        t.set_defaults(func=func)

    d = sub.add_parser("decode", help="streaming decode with speaker-change and gender annotation")
    d.add_argument("--data", required=True)
    d.add_argument("--st", required=True)
    d.add_argument("--tvector", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--threshold", type=float)
    d.add_argument("--min-gap", type=float)
    d.add_argument("--gender-mode", choices=["max", "centroid"])
    d.add_argument("--profiles")
    d.add_argument("--beam", type=int)
    d.add_argument("--lang", help="override every sample's language")
    d.add_argument("--sid-window", type=int)
    d.add_argument("--sid-noise", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--full", action="store_true", help="whole-utterance instead of chunk-by-chunk decoding")
    d.set_defaults(func=cmd_decode)

    for name, func in [("evaluate-scd", cmd_evaluate_scd), ("sweep", cmd_sweep), ("evaluate-gender", cmd_evaluate_gender)]:
        e = sub.add_parser(name)
        e.add_argument("--hyp", required=True, help="decode output directory")
        e.add_argument("--ref", required=True, help="reference JSON lines")
        e.add_argument("--report", required=True, help="report stem (.tsv and .json)")
        if name != "evaluate-gender":
            e.add_argument("--tolerance", type=float)
        if name == "sweep":
            e.add_argument("--thresholds", help="comma-separated list")
            e.add_argument("--min-gap", type=float)
        e.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, load_config(args.config))
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except DataError as e:
        log.error("%s", e)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        log.error("%s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
