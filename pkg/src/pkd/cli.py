"""Command line entry point.

Every subcommand resolves its settings as CLI flag > config file > default.
The config file is flat ``key = value`` text; keys are the long flag names with
underscores (``noise_sigma = 2.0``), ``#`` starts a comment. Runs append one
JSON line per artifact set to ``<out>/manifest.jsonl`` keyed by config hash.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiments
from .curriculum import gap_reduction, parse_path, run_path, score, spec_for, train_single
from .formats import FormatError
from .losses import Hyper
from .metrics import EvalReport, evaluate, load_predictions
from .models import Checkpoint, ModelSpec
from .synthgen import GenConfig, SequenceSet, bayes_oracle, generate

log = logging.getLogger("pkd")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config


def read_config(path):
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(value, like):
    if isinstance(value, str) and like is not None and not isinstance(like, str):
        if isinstance(like, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"not a boolean: {value!r}")
        try:
            return type(like)(value)
        except ValueError:
            raise UsageError(f"cannot read {value!r} as {type(like).__name__}") from None
    return value


def resolve(args, file_cfg, defaults):
    """Merge explicit CLI values over the config file over ``defaults``."""
    out = dict(defaults)
    for k, v in file_cfg.items():
        if k in out:
            out[k] = _coerce(v, defaults[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, default=str, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def record(out_dir, command, cfg, artifacts):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {"command": command, "config_hash": config_hash(cfg), "config": cfg,
             "artifacts": {str(p): _file_sha(p) for p in artifacts}}
    with open(out_dir / "manifest.jsonl", "a") as f:
        f.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
    return entry


def _hyper_defaults():
    return {f.name: f.default for f in fields(Hyper)}


def _hyper(cfg):
    return Hyper(**{k: cfg[k] for k in _hyper_defaults()})


def _spec_kw(cfg):
    kw = {"layers": cfg["layers"], "past_extent": cfg["past_extent"], "channels": cfg["channels"]}
    if cfg.get("aux_channels"):
        kw["aux_channels"] = cfg["aux_channels"]
    return kw


_SPEC_DEFAULTS = {"layers": 2, "past_extent": 4, "channels": 32, "aux_channels": 0}


def _load_data(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset {path} not found (create it with 'pkd gen-data')")
    return SequenceSet.load(path)


def _load_ckpt(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    return Checkpoint.load(path)


def _check_dims(ck, data):
    if ck.spec.input_dim != data.D or ck.spec.num_classes != data.M:
        raise UsageError(f"model {ck.spec.name} expects D={ck.spec.input_dim}, M={ck.spec.num_classes} "
                         f"but dataset has D={data.D}, M={data.M}")


# ---------------------------------------------------------------- commands


def _gen_defaults():
    d = GenConfig().to_dict()
    d.pop("groups")
    return d


def cmd_gen_data(args, file_cfg):
    cfg = resolve(args, file_cfg, {**_gen_defaults(), "out": "runs"})
    out = Path(cfg.pop("out"))
    gen = GenConfig(**cfg, groups=GenConfig().groups)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "train.pkds", out / "test.pkds"]
    existing = [p for p in paths if p.exists()]
    if existing and not args.force:
        raise UsageError(f"{existing[0]} exists; pass --force to overwrite")
    for p, split in zip(paths, ("train", "test")):
        generate(gen, split).save(p)
    record(out, "gen-data", gen.to_dict(), paths + [Path(str(p) + ".json") for p in paths])
    print(f"wrote {paths[0]} and {paths[1]} (config hash {gen.hash()})")


def _train_defaults():
    return {**_hyper_defaults(), **_SPEC_DEFAULTS, "data": None, "model": "S", "out": "runs"}


def cmd_train(args, file_cfg):
    cfg = resolve(args, file_cfg, _train_defaults())
    data = _load_data(_required(cfg, "data"))
    spec = spec_for(cfg["model"], data.D, data.M, **_spec_kw(cfg))
    name = cfg["model"].strip()
    ck, tlog = train_single(spec, data, _hyper(cfg))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.pkdc"
    ck.save(path)
    (out / f"{name}.log.jsonl").write_text(tlog.to_jsonl())
    record(out, "train", cfg, [path])
    print(f"{name}: best epoch {tlog.best_epoch}, held-out mAP {tlog.best_metric:.2f} -> {path}")


def _parse_stage_hypers(items, base):
    out = {}
    for item in items or []:
        name, _, body = item.partition(":")
        changes = {}
        for kv in filter(None, body.split(",")):
            k, _, v = kv.partition("=")
            k = k.strip()
            if k not in _hyper_defaults():
                raise UsageError(f"unknown hyperparameter {k!r} in --stage-hyper {item!r}")
            changes[k] = _coerce(v.strip(), getattr(base, k))
        out[name.strip()] = Hyper(**{**base.to_dict(), **changes})
    return out


def _distill_defaults():
    return {**_train_defaults(), "path": "S>T1>T2>T3>T4", "pretrained": None, "aux_sweep": None}


def _load_pretrained(directory, names, data):
    pre = {}
    if directory is None:
        return pre
    for name in names:
        p = Path(directory) / f"{name}.pkdc"
        if p.exists():
            ck = Checkpoint.load(p)
            _check_dims(ck, data)
            pre[name] = ck
    return pre


def cmd_distill(args, file_cfg):
    cfg = resolve(args, file_cfg, _distill_defaults())
    data = _load_data(_required(cfg, "data"))
    path = parse_path(cfg["path"])
    hyper = _hyper(cfg)
    stage_hypers = _parse_stage_hypers(args.stage_hyper, hyper)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    widths = [cfg["aux_channels"] or cfg["channels"]]
    if cfg["aux_sweep"]:
        widths = [cfg["channels"] if w.strip().upper() == "C" else int(w) for w in str(cfg["aux_sweep"]).split(",")]
    for width in widths:
        kw = _spec_kw({**cfg, "aux_channels": width})
        pre = _load_pretrained(cfg["pretrained"], path.models, data)
        if "S" in pre and pre["S"].spec.aux != width:
            pre.pop("S")  # a different auxiliary width needs its own baseline
        n_before = set(pre)
        final, logs = run_path(path, data, hyper, pre, kw, stage_hypers)
        if cfg["pretrained"]:
            Path(cfg["pretrained"]).mkdir(parents=True, exist_ok=True)
            for name in set(pre) - n_before:
                pre[name].save(Path(cfg["pretrained"]) / f"{name}.pkdc")
        tag = str(path).replace(">", "-") + ("" if len(widths) == 1 else f"_aux{width}")
        ck_path = out / f"{tag}.pkdc"
        final.save(ck_path)
        (out / f"{tag}.log.jsonl").write_text("".join(l.to_jsonl() for l in logs))
        record(out, "distill", {**cfg, "aux_channels": width}, [ck_path])
        print(f"{path} (aux {width}): stage best held-out mAP "
              + ", ".join(f"{l.best_metric:.2f}" for l in logs) + f" -> {ck_path}")


def _eval_defaults():
    return {"model": None, "predictions": None, "data": None, "portions": 0, "format": "json",
            "out": "runs", "label": None}


def cmd_eval(args, file_cfg):
    cfg = resolve(args, file_cfg, _eval_defaults())
    if cfg["format"] not in ("json", "csv"):
        raise UsageError(f"--format must be json or csv, got {cfg['format']!r}")
    bins = cfg["portions"] or None
    if cfg["predictions"]:
        if not Path(cfg["predictions"]).exists():
            raise UsageError(f"prediction file {cfg['predictions']} not found")
        scores, labels, lengths = load_predictions(cfg["predictions"])
        rep = evaluate(scores, labels, portions=bins, lengths=lengths)
        label = cfg["label"] or Path(cfg["predictions"]).stem
    else:
        ck = _load_ckpt(_required(cfg, "model"))
        data = _load_data(_required(cfg, "data"))
        _check_dims(ck, data)
        rep = score(ck, data, portions=bins)
        label = cfg["label"] or Path(cfg["model"]).stem
        rep.extra["model"] = ck.spec.name
    out = Path(cfg["out"]) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    base, top = out / "S.json", out / "T4.json"
    if label not in ("S", "T4") and base.exists() and top.exists():
        b = json.loads(base.read_text())["map"]
        t = json.loads(top.read_text())["map"]
        if t > b:
            rep.extra["gap_reduction"] = gap_reduction(b, rep.map, t)
    path = out / f"{label}.{cfg['format']}"
    path.write_text(rep.to_json() if cfg["format"] == "json" else rep.to_csv())
    if cfg["format"] == "csv":
        (out / f"{label}.json").write_text(rep.to_json())
    record(Path(cfg["out"]), "eval", cfg, [path])
    extra = f", gap reduction {rep.extra['gap_reduction']:.1f}%" if "gap_reduction" in rep.extra else ""
    print(f"{label}: mAP {rep.map:.2f}, mcAP {rep.mcap:.2f}{extra} -> {path}")


def _oracle_defaults():
    return {"data": None, "windows": "0,2,4,6,8", "out": "runs"}


def cmd_oracle(args, file_cfg):
    cfg = resolve(args, file_cfg, _oracle_defaults())
    data = _load_data(_required(cfg, "data"))
    if not data.config:
        raise UsageError(f"{cfg['data']} has no generator sidecar; the oracle needs the config")
    gen = GenConfig.from_dict(data.config)
    windows = [max(data.lengths) if w.strip() == "full" else int(w) for w in str(cfg["windows"]).split(",")]
    rows = []
    for w in windows:
        _, rep = bayes_oracle(gen, data, w)
        rows.append({"w": w, "map": rep.map, "mcap": rep.mcap})
        print(f"w={w:4d}  mAP {rep.map:6.2f}  mcAP {rep.mcap:6.2f}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "oracle.json"
    path.write_text(json.dumps(rows, indent=2))
    record(out, "oracle", cfg, [path])


def cmd_stream(args, file_cfg):
    cfg = resolve(args, file_cfg, {"model": None})
    from .stream import create_session
    ck = _load_ckpt(_required(cfg, "model"))
    sess = create_session(ck)
    D = ck.spec.input_dim
    src = sys.stdin.buffer
    out = sys.stdout
    n = 0
    while True:
        buf = src.read(4 * D)
        if not buf:
            break
        if len(buf) != 4 * D:
            raise UsageError(f"truncated frame {n}: got {len(buf)} bytes, expected {4 * D}")
        logits = sess.push_frame(np.frombuffer(buf, dtype="<f4"))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        out.write(f"{n},{int(np.argmax(p))}," + ",".join(f"{v:.6f}" for v in p) + "\n")
        n += 1
    out.flush()


def _predict_defaults():
    return {**_train_defaults(), "test": None, "P": 1, "sweep": None}


def cmd_predict_baseline(args, file_cfg):
    cfg = resolve(args, file_cfg, _predict_defaults())
    data = _load_data(_required(cfg, "data"))
    test = _load_data(cfg["test"]) if cfg["test"] else None
    Ps = experiments.parse_int_list(cfg["sweep"]) if cfg["sweep"] else [cfg["P"]]
    if min(Ps) < 1:
        raise UsageError(f"P must be >= 1, got {min(Ps)}")
    hyper = _hyper(cfg)
    kw = _spec_kw(cfg)
    kw.pop("aux_channels", None)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, arts = [], []
    for P in Ps:
        spec = ModelSpec("anticipation", data.D, data.M, **kw)
        ck, tlog = train_single(spec, data, hyper, P=P)
        path = out / f"A_P{P}.pkdc"
        ck.save(path)
        arts.append(path)
        row = {"P": P, "holdout_map": tlog.best_metric}
        if test is not None:
            rep = score(ck, test)
            row.update(test_map=rep.map, test_mcap=rep.mcap)
        rows.append(row)
        print(", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if len(Ps) > 1:
        key = "test_map" if test is not None else "holdout_map"
        shape = experiments.sweep_shape([r[key] for r in rows])
        csv_path = out / "predict_sweep.csv"
        csv_path.write_text(experiments.sweep_csv(rows, shape))
        arts.append(csv_path)
        print(f"sweep shape: {shape} -> {csv_path}")
    record(out, "predict-baseline", cfg, arts)


def cmd_report(args, file_cfg):
    cfg = resolve(args, file_cfg, {"out": "runs"})
    rdir = Path(cfg["out"]) / "reports"
    reports = sorted(rdir.glob("*.json")) if rdir.exists() else []
    if not reports:
        raise UsageError(f"no reports under {rdir}; run 'pkd eval' first")
    rows = []
    for p in reports:
        rep = EvalReport.from_dict(json.loads(p.read_text()))
        rows.append((p.stem, rep.map, rep.mcap, rep.extra.get("gap_reduction")))
    lines = ["| run | mAP | mcAP | gap reduction |", "|---|---|---|---|"]
    for name, m, c, g in rows:
        lines.append(f"| {name} | {m:.2f} | {c:.2f} | {'' if g is None else f'{g:.1f}%'} |")
    text = "\n".join(lines) + "\n"
    (Path(cfg["out"]) / "report.md").write_text(text)
    print(text, end="")


# ---------------------------------------------------------------- parser


def _required(cfg, key):
    if cfg.get(key) in (None, ""):
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")
    return cfg[key]


def _add_hyper(p):
    for f in fields(Hyper):
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool or isinstance(f.default, bool):
            p.add_argument(flag, type=lambda s: _coerce(s, True), default=None, metavar="BOOL")
        else:
            p.add_argument(flag, type=type(f.default), default=None)


def _add_spec(p):
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--past-extent", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--aux-channels", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="pkd", description="Progressive distillation for online action detection")
    ap.add_argument("--config", help="flat key = value settings file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    for k, v in _gen_defaults().items():
        p.add_argument("--" + k.replace("_", "-"), type=type(v), default=None)
    p.add_argument("--ambiguity", dest="ambiguity_len", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train S or a teacher Tk on the classification loss")
    p.add_argument("--data")
    p.add_argument("--model", help="S, T1, T2, T3 or T4")
    p.add_argument("--out")
    _add_hyper(p)
    _add_spec(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="run a distillation path")
    p.add_argument("--data")
    p.add_argument("--path", help='e.g. "S>T1>T2>T3>T4" or "T4>T2>S"')
    p.add_argument("--pretrained", help="directory of pretrained <name>.pkdc; missing ones are trained and saved")
    p.add_argument("--stage-hyper", action="append", metavar="NAME:k=v,...",
                   help="override hyperparameters for the stage against NAME")
    p.add_argument("--aux-sweep", help="comma list of auxiliary widths, C for the main width")
    p.add_argument("--out")
    _add_hyper(p)
    _add_spec(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    p.add_argument("--model")
    p.add_argument("--predictions")
    p.add_argument("--data")
    p.add_argument("--portions", type=int, default=None)
    p.add_argument("--format", default=None)
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="Bayes oracle ceilings by future window")
    p.add_argument("--data")
    p.add_argument("--windows", help="comma list; 'full' means smoothing")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("stream", help="stream f32 frames from stdin through a student")
    p.add_argument("--model")
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("predict-baseline", help="anticipation-then-classify baseline")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--P", type=int, default=None)
    p.add_argument("--sweep", help="P values, e.g. 1-6 or 1,2,4")
    p.add_argument("--out")
    _add_hyper(p)
    _add_spec(p)
    p.set_defaults(fn=cmd_predict_baseline)

    p = sub.add_parser("report", help="comparison table of all eval reports")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = read_config(args.config) if args.config else {}
        args.fn(args, file_cfg)
    except (ValueError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
