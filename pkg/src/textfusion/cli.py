"""Command-line entry point: ``textfusion {synth,train,eval,retrieve,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio
from .embeddings import fixture_path, load_embeddings
from .evaluate import attention_dump, report_csv, report_table
from .model import (VARIANTS, Batch, ModelConfig, ModelParams, forward, gradient_report, load_checkpoint,
                    save_checkpoint)
from .pipeline import check_compatible, classify, fit, retrieve
from .trainer import TrainConfig, history_csv

log = logging.getLogger("textfusion")


class UsageError(Exception):
    pass


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# config file ------------------------------------------------------------

_PATH_KEYS = ("manifest", "embeddings", "checkpoint", "loss_csv")
_MODEL_KEYS = {"fused_v_dim": int, "model_seed": int, "variant": str, "beta": str,
               "v_dim": int, "t_dim": int, "num_classes": int}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_CASTS = {"int": int, "float": float, int: int, float: float, str: str}


@dataclass
class RunConfig:
    manifest: Path
    embeddings: Path
    checkpoint: Path
    loss_csv: Path
    variant: str = "fused"
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)


def parse_config(path) -> RunConfig:
    """Flat ``key = value`` file; ``#`` starts a comment. Relative paths resolve against the file."""
    path = Path(path)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    unknown = set(raw) - set(_PATH_KEYS) - set(_MODEL_KEYS) - set(_TRAIN_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    base = path.parent
    paths = {}
    for key in _PATH_KEYS:
        if key == "embeddings" and key not in raw:
            paths[key] = fixture_path()
            continue
        if key not in raw:
            raise UsageError(f"{path}: missing required key {key!r}")
        p = Path(raw[key])
        paths[key] = p if p.is_absolute() else base / p
    try:
        model = {k: _MODEL_KEYS[k](v) for k, v in raw.items() if k in _MODEL_KEYS}
        if "beta" in model:
            model["beta"] = tuple(float(b) for b in model["beta"].split(","))
        train = TrainConfig(**{k: _CASTS[_TRAIN_KEYS[k]](v) for k, v in raw.items() if k in _TRAIN_KEYS})
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    variant = model.pop("variant", "fused")
    if variant not in VARIANTS:
        raise UsageError(f"{path}: variant must be one of {VARIANTS}")
    return RunConfig(variant=variant, model=model, train=train, **paths)


def build_model_config(run: RunConfig, manifest, table) -> ModelConfig:
    m = dict(run.model)
    inferred = {"v_dim": manifest.v_dim, "t_dim": table.dim, "num_classes": manifest.num_classes}
    for key, value in inferred.items():
        if key in m and m[key] != value:
            raise UsageError(f"config {key}={m[key]} but the data has {value}")
        m[key] = value
    seed = m.pop("model_seed", 0)
    return ModelConfig(variant=run.variant, seed=seed, **m)


# commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.kind == "overfit":
        m = dataio.synth_overfit(args.k, args.per_class, args.v_dim, args.seed)
    elif args.kind == "text_only":
        m = dataio.synth_text_only(args.k, args.per_class, args.v_dim, args.seed)
    else:
        m = dataio.synth_noisy_words(args.k, args.per_class, args.v_dim, args.noise, args.seed)
    table = load_embeddings(args.embeddings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_manifest(m, out, sidecar=args.sidecar)
    n_max = dataio.manifest_nmax(m, table)
    print(f"wrote {out}: K={m.num_classes} samples={len(m.samples)} "
          f"train={len(m.split('train'))} test={len(m.split('test'))} n_max={n_max}")
    return 0


def cmd_train(args) -> int:
    run = parse_config(args.config)
    manifest = dataio.load_manifest(run.manifest)
    table = load_embeddings(run.embeddings)
    model_config = build_model_config(run, manifest, table)
    result = fit(manifest, table, model_config, run.train)
    run.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.checkpoint, result.params)
    write_atomic(run.loss_csv, history_csv(result.history))
    last = result.history[-1]
    print(f"trained {model_config.variant} for {len(result.history)} iterations; "
          f"final loss {last.loss:.6f}; checkpoint {run.checkpoint}")
    return 0


def _load_for_eval(args):
    params = load_checkpoint(args.checkpoint)
    manifest = dataio.load_manifest(args.manifest)
    table = load_embeddings(args.embeddings)
    check_compatible(params, manifest, table)
    return params, manifest, table


def cmd_eval(args) -> int:
    params, manifest, table = _load_for_eval(args)
    report, batch, _, _ = classify(params, manifest, table, args.split)
    weights = forward(params, batch, "infer").weights
    out = Path(args.out_dir)
    stem = f"classification_{args.split}"
    write_atomic(out / f"{stem}.csv", report_csv(report, manifest.class_names))
    write_atomic(out / f"{stem}.txt", report_table(report, manifest.class_names, params.config.variant))
    write_atomic(out / f"attention_{args.split}.tsv", attention_dump(batch.ids, batch.words, weights))
    print(f"{args.split} mAP {report.map:.6f} over {len(report.per_class_ap)} classes")
    return 0


def cmd_retrieve(args) -> int:
    params, manifest, table = _load_for_eval(args)
    report = retrieve(params, manifest, table)
    out = Path(args.out_dir)
    write_atomic(out / "retrieval.csv", report_csv(report, manifest.class_names))
    write_atomic(out / "retrieval.txt", report_table(report, manifest.class_names, params.config.variant))
    print(f"retrieval mAP {report.map:.6f} over {report.num_items} queries")
    return 0


def micro_problem(seed: int, v_dim: int, t_dim: int, fused_v_dim: int, k: int, n_max: int, batch: int):
    """Random micro-model and micro-batch; the last sample has no words, the rest at least two."""
    rng = np.random.default_rng(seed)
    params = ModelParams.init(ModelConfig(num_classes=k, v_dim=v_dim, t_dim=t_dim,
                                          fused_v_dim=fused_v_dim, seed=seed))
    # move batch-norm scale/shift and biases off their initial values
    for name, t in params.tensors().items():
        if name.endswith(".b") or name.startswith("bn_"):
            t += rng.normal(scale=0.3, size=t.shape)
    counts = rng.integers(min(2, n_max), n_max + 1, size=batch)
    counts[-1] = 0
    mask = np.arange(n_max)[None, :] < counts[:, None]
    text = rng.normal(size=(batch, t_dim, n_max)) * mask[:, None, :]
    data = Batch(rng.normal(size=(batch, v_dim)) + 1.0, text, mask, rng.integers(0, k, size=batch))
    return params, data


def cmd_gradcheck(args) -> int:
    ok = True
    for seed in args.seed:
        params, data = micro_problem(seed, args.v_dim, args.t_dim, args.fused_dim, args.k, args.n_max, args.batch)
        err, name, index = gradient_report(params, data, args.step, corrupt=args.corrupt)
        passed = err < args.tol
        ok &= passed
        where = f"{name}[{','.join(str(int(i)) for i in index)}]"
        print(f"seed {seed}: max relative error {err:.3e} at {where} -> {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset manifest")
    s.add_argument("kind", choices=["overfit", "text_only", "noisy"])
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--v-dim", type=int, default=8)
    s.add_argument("--noise", type=int, default=3, help="misleading keywords per sample (noisy only)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--embeddings", default=str(fixture_path()))
    s.add_argument("--sidecar", action="store_true", help="store visual vectors in a float32 sidecar")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "classification AP/mAP and attention dump"),
                            ("retrieve", cmd_retrieve, "cosine retrieval mAP, test queries vs train")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--embeddings", default=str(fixture_path()))
        e.add_argument("--out-dir", required=True)
        if name == "eval":
            e.add_argument("--split", choices=dataio.SPLITS, default="test")
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    g.add_argument("--seed", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    g.add_argument("--v-dim", type=int, default=6)
    g.add_argument("--t-dim", type=int, default=5)
    g.add_argument("--fused-dim", type=int, default=4)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--n-max", type=int, default=3)
    g.add_argument("--batch", type=int, default=6)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
