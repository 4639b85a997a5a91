"""Command line: python -m nmfnet <command> [options]."""
import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import structlog
import uvicorn

from .config import settings
from .errors import NmfError
from .log import configure_logging
from .models.enums import BenchArm, Preset
from .models.network import build
from .schemas.bench import LayerBenchSpec
from .services.bench import bench_backward, emit_report
from .services.cifar import load_cifar10, stratified_subset
from .services.classic_nmf import factorize
from .services.config_parser import parse_config
from .services.gradcheck import format_rows, run_gradcheck
from .services.local_baseline import run_local_baseline
from .services.storage import StorageService, read_matrix, write_json, write_matrix
from .services.sweep import format_sweep, sweep
from .services.trainer import evaluate, fit

log = structlog.get_logger(__name__)

EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2

ARM_ALIASES = {"cnn": BenchArm.CNN, "unrolled": BenchArm.NMF_UNROLLED, "approx": BenchArm.NMF_APPROX}


def parse_layer(text: str) -> tuple[LayerBenchSpec, list[int]]:
    """`S=1600,I=64,N=20:40:80[,batch=32][,epsilon=1.0]` -> (layer, N list)."""
    fields = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        fields[key.strip()] = value.strip()
    if "N" not in fields:
        raise argparse.ArgumentTypeError("layer spec needs N (colon-separated for several)")
    n_list = [int(n) for n in fields.pop("N").split(":")]
    try:
        return LayerBenchSpec.model_validate(fields), n_list
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def parse_arms(text: str) -> list[BenchArm]:
    arms = []
    for name in text.split(","):
        name = name.strip()
        if name in ARM_ALIASES:
            arms.append(ARM_ALIASES[name])
        else:
            try:
                arms.append(BenchArm(name))
            except ValueError:
                raise argparse.ArgumentTypeError(f"unknown arm {name!r}")
    return arms


def _load_run_config(path: Optional[str]):
    text = Path(path).read_text() if path else ""
    return parse_config(text)


def _load_data(args, seed: int):
    train, test = load_cifar10(args.data)
    if args.per_class:
        train = stratified_subset(train, args.per_class, seed=seed)
        test = stratified_subset(test, max(1, args.per_class // 5), seed=seed)
    return train, test


def cmd_factorize(args) -> int:
    X = read_matrix(args.input)
    result = factorize(X, args.rank, iters=args.iters, seed=args.seed, tol=args.tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "W.csv", result.W)
    write_matrix(out / "H.csv", result.H)
    write_matrix(out / "divergence.csv", [[v] for v in result.divergence_history], header=["kl"])
    print(f"rounds={len(result.divergence_history)} kl={result.divergence_history[-1]:.6g}")
    return 0


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    train_cfg = run.train.model_copy(update={"seed": args.seed}) if args.seed is not None else run.train
    if args.epochs:
        train_cfg = train_cfg.model_copy(update={"max_epochs": args.epochs})
    train, test = _load_data(args, train_cfg.seed)
    out = StorageService(args.out).run_dir(args.name)
    (out / "config.txt").write_text(Path(args.config).read_text() if args.config else "")
    model = build(run.network, seed=train_cfg.seed)
    report = fit(model, train, train_cfg, out_dir=out)
    _, test_acc = evaluate(model, test, train_cfg.alpha, cfg=train_cfg)
    print(f"epochs={len(report.epochs)} best_epoch={report.best_epoch} test_acc={test_acc:.4f} out={out}")
    return 0


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(instances=args.instances, seed=args.seed, n_iters=args.iters)
    print(format_rows(result.rows))
    return 0 if result.passed else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    layer, n_list = args.layer
    report = bench_backward(
        layer,
        n_list,
        arms=args.arms,
        repetitions=args.repetitions,
        warmup=args.warmup,
        seed=args.seed,
        workers=args.workers,
    )
    print(emit_report(report, args.out))
    return 0


def cmd_sweep(args) -> int:
    train = test = None
    train_cfg = _load_run_config(args.config).train
    if args.data:
        train, test = _load_data(args, train_cfg.seed)
        if args.epochs:
            train_cfg = train_cfg.model_copy(update={"max_epochs": args.epochs})
    rows = sweep(Preset(args.preset), train=train, test=test, train_cfg=train_cfg)
    print(format_sweep(rows))
    if args.out:
        write_json(args.out, {"rows": [r.model_dump(mode="json") for r in rows]})
    return 0


def cmd_local_baseline(args) -> int:
    run = _load_run_config(args.config)
    train_cfg = run.train
    if args.epochs:
        train_cfg = train_cfg.model_copy(update={"max_epochs": args.epochs})
    train, test = _load_data(args, train_cfg.seed)
    model = build(run.network, seed=train_cfg.seed)
    result = run_local_baseline(model, train, test, train_cfg, iters=args.iters)
    print(f"local_accuracy={result.local_accuracy:.4f} frozen={','.join(result.frozen)}")
    if args.out:
        write_json(args.out, result.model_dump(mode="json"))
    return 0


def cmd_serve(args) -> int:
    uvicorn.run("nmfnet.main:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmfnet", description=__doc__)
    p.add_argument("--log-level", default=None, help="overrides NMFNET_LOG_LEVEL")
    p.add_argument("--log-json", action="store_true", default=None, help="JSON log lines")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("factorize", help="classic KL-NMF of a CSV / plain-text matrix")
    f.add_argument("--input", required=True)
    f.add_argument("--rank", type=int, required=True)
    f.add_argument("--iters", type=int, default=200)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tol", type=float, default=None)
    f.add_argument("--out", default=".")
    f.set_defaults(func=cmd_factorize)

    def data_args(q):
        q.add_argument("--config", help="run configuration file")
        q.add_argument("--data", default=settings.DATA_DIR, help="CIFAR-10 binary directory")
        q.add_argument("--per-class", type=int, default=0, help="stratified subset size per class")
        q.add_argument("--epochs", type=int, default=0, help="overrides max_epochs")

    t = sub.add_parser("train", help="train a network on CIFAR-10")
    data_args(t)
    t.add_argument("--out", default=settings.OUTPUT_DIR)
    t.add_argument("--name", default=None, help="run directory name")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="gradient checks on random instances")
    g.add_argument("--instances", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--iters", type=int, default=None, help="N for the cosine rows")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="backward-pass time and memory per arm")
    b.add_argument("--layer", type=parse_layer, required=True, help="S=..,I=..,N=20:40:80[,batch=..]")
    b.add_argument("--arms", type=parse_arms, default=list(BenchArm), help="cnn,unrolled,approx")
    b.add_argument("--repetitions", type=int, default=11)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="width x groups parameter sweep")
    s.add_argument("--preset", default=Preset.CNMF_MIX.value, choices=[p.value for p in Preset])
    s.add_argument("--config", default=None)
    s.add_argument("--data", default=None, help="train every config when given")
    s.add_argument("--per-class", type=int, default=0)
    s.add_argument("--epochs", type=int, default=0)
    s.add_argument("--out", default=None, help="JSON output")
    s.set_defaults(func=cmd_sweep)

    lb = sub.add_parser("local-baseline", help="frozen unsupervised NMF dictionaries")
    data_args(lb)
    lb.add_argument("--iters", type=int, default=100, help="classic NMF rounds per layer")
    lb.add_argument("--out", default=None, help="JSON output")
    lb.set_defaults(func=cmd_local_baseline)

    sv = sub.add_parser("serve", help="run the HTTP API")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_json)
    try:
        return args.func(args)
    except (NmfError, OSError) as e:
        log.error("command failed", command=args.command, error=str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
