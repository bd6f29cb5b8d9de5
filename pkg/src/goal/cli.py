"""Command-line pipeline tying the package together.

Subcommands cover the full workflow: ``gen-data`` builds a synthetic
dataset, ``match`` mines local pairs with a trained checkpoint,
``train`` fits one ablation, ``eval`` writes a retrieval report,
``ablate`` runs the four-way comparison, ``gradcheck`` verifies
gradients against finite differences, and ``inspect`` pretty-prints
the package's binary and JSONL artifacts.

Every artifact-producing run writes a ``run_manifest.json`` next to (or
inside) its output recording the command line, the resolved
configuration, SHA-256 hashes of all inputs and outputs, the seed, and
the wall time. Re-running with identical inputs reproduces identical
output hashes.

Exit codes: 0 success, 2 validation (bad flags, bad schemas), 3 I/O
(missing or unreadable files), 4 internal-invariant violations. Every
failure prints a single machine-parsable ``ERROR <code>:`` line to
stderr.

The ``GOAL_THREADS`` environment variable caps BLAS/OpenMP parallelism;
it must be applied before numpy first loads, which is why this module
imports the numeric submodules lazily inside each handler.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

_THREAD_ENV_KEYS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env() -> None:
    """Propagate GOAL_THREADS to the BLAS/OpenMP knobs if it parses.

    Runs at import time so the limits are in place before any handler
    pulls in numpy. Invalid values are left for main() to report.
    """
    value = os.environ.get("GOAL_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return
    if n >= 1:
        for key in _THREAD_ENV_KEYS:
            os.environ[key] = str(n)


_apply_thread_env()

from .errors import GoalError, ValidationError  # noqa: E402


# ---- run manifests ----


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_path(path: Path, exclude: frozenset[str] = frozenset()) -> dict[str, str]:
    """Map of relative file path -> sha256 for a file or directory tree."""
    path = Path(path)
    if path.is_file():
        return {path.name: _hash_file(path)}
    if not path.is_dir():
        raise FileNotFoundError(path)
    hashes = {}
    for item in sorted(p for p in path.rglob("*") if p.is_file()):
        rel = item.relative_to(path).as_posix()
        if rel in exclude:
            continue
        hashes[rel] = _hash_file(item)
    return hashes


RUN_MANIFEST_NAME = "run_manifest.json"
_EXCLUDED_FROM_OUTPUT_HASH = frozenset({RUN_MANIFEST_NAME})


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / RUN_MANIFEST_NAME
    return out.with_name(out.name + ".manifest.json")


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    return value


def write_run_manifest(command: list[str], args: argparse.Namespace,
                       inputs: dict[str, Path], out: Path,
                       started: float) -> Path:
    """Record provenance for one run next to (or inside) its output."""
    config = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": list(command),
        "config": config,
        "inputs": {label: {"path": str(p), "sha256": _hash_path(Path(p))}
                   for label, p in inputs.items()},
        "outputs": _hash_path(out, exclude=_EXCLUDED_FROM_OUTPUT_HASH),
        "seed": getattr(args, "seed", None),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = _manifest_path(out)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ---- subcommand handlers ----


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{flag}: no such file: {p}")
    return p


def _require_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{flag}: no such directory: {p}")
    return p


def _cmd_gen_data(args, command):
    from .data import generate_dataset

    started = time.perf_counter()
    out = Path(args.out)
    dataset = generate_dataset(seed=args.seed, n_samples=args.n, out_dir=out)
    write_run_manifest(command, args, {}, out, started)
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def _cmd_match(args, command):
    from .data import load_dataset
    from .encoders import load_checkpoint
    from .lism import match_dataset, write_pairs

    started = time.perf_counter()
    ckpt = _require_dir(args.ckpt, "--ckpt")
    data = _require_dir(args.data, "--data")
    model = load_checkpoint(ckpt)
    dataset = load_dataset(data)
    pairs = match_dataset(model, dataset, expand_frac=args.expand_frac)
    out = Path(args.out)
    write_pairs(out, pairs)
    write_run_manifest(command, args, {"ckpt": ckpt, "data": data}, out, started)
    print(f"matched {len(pairs)} of {len(dataset)} samples -> {out}")
    return 0


def _build_train_config(args):
    from .losses import LossWeights
    from .trainer import TrainConfig

    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        ablation=args.ablation,
        weights=LossWeights(lambda_global=args.lambda_global,
                            lambda_local=args.lambda_local,
                            lambda_tsl=args.lambda_tsl),
    )


def _cmd_train(args, command):
    from .data import load_dataset
    from .lism import read_pairs
    from .trainer import train

    started = time.perf_counter()
    data = _require_dir(args.data, "--data")
    inputs = {"data": data}
    pairs = None
    if args.pairs is not None:
        pairs_path = _require_file(args.pairs, "--pairs")
        inputs["pairs"] = pairs_path
        pairs = read_pairs(pairs_path)
    config = _build_train_config(args)
    dataset = load_dataset(data)
    out = Path(args.out)
    _, history = train(dataset, pairs, config, out_dir=out)
    write_run_manifest(command, args, inputs, out, started)
    final = history[-1]
    print(f"trained {args.ablation} for {args.epochs} epochs; "
          f"final L_total {final['L_total']:.6f} -> {out}")
    return 0


def _cmd_eval(args, command):
    from .data import load_dataset
    from .encoders import load_checkpoint
    from .evaluation import evaluate_joint, evaluate_original, write_report_csv
    from .lism import build_joint_items, read_pairs

    started = time.perf_counter()
    ckpt = _require_dir(args.ckpt, "--ckpt")
    data = _require_dir(args.data, "--data")
    inputs = {"ckpt": ckpt, "data": data}
    model = load_checkpoint(ckpt)
    dataset = load_dataset(data)
    if args.mode == "original":
        metrics = evaluate_original(model, dataset)
    else:
        if args.pairs is None:
            raise ValidationError("joint mode requires --pairs")
        pairs_path = _require_file(args.pairs, "--pairs")
        inputs["pairs"] = pairs_path
        joint = build_joint_items(dataset, read_pairs(pairs_path))
        metrics = evaluate_joint(model, joint)
    out = Path(args.out)
    write_report_csv(out, args.mode, metrics)
    write_run_manifest(command, args, inputs, out, started)
    print(f"wrote {args.mode} report -> {out}")
    return 0


def _cmd_ablate(args, command):
    from .data import load_dataset
    from .lism import read_pairs
    from .trainer import run_ablation_suite

    started = time.perf_counter()
    data = _require_dir(args.data, "--data")
    pairs_path = _require_file(args.pairs, "--pairs")
    inputs = {"data": data, "pairs": pairs_path}
    dataset = load_dataset(data)
    pairs = read_pairs(pairs_path)
    test_dataset = None
    if args.test_data is not None:
        test_dir = _require_dir(args.test_data, "--test-data")
        inputs["test_data"] = test_dir
        test_dataset = load_dataset(test_dir)
    test_pairs = None
    if args.test_pairs is not None:
        tp_path = _require_file(args.test_pairs, "--test-pairs")
        inputs["test_pairs"] = tp_path
        test_pairs = read_pairs(tp_path)
    config = _build_train_config(args)
    out = Path(args.out)
    result = run_ablation_suite(dataset, pairs, config, out,
                                test_dataset=test_dataset, test_pairs=test_pairs)
    write_run_manifest(command, args, inputs, out, started)
    for row in result["comparison"]:
        print(f"{row['method']:>12}  T2I R@1 {row['T2I_R@1']}  I2T R@1 {row['I2T_R@1']}")
    print(f"wrote comparison.csv and joint_map.csv -> {out}")
    return 0


def _cmd_gradcheck(args, command):
    from .trainer import run_gradcheck

    report = run_gradcheck(seed=args.seed)
    print(f"checked {report.n_entries} gradient entries in {report.seconds:.1f}s; "
          f"max relative error {report.max_rel_err:.3e} ({report.worst_param})")
    if not report.ok:
        raise GoalError(f"gradient check failed: max relative error "
                        f"{report.max_rel_err:.3e} at {report.worst_param}")
    print("gradcheck ok")
    return 0


def _inspect_checkpoint(path: Path) -> None:
    from .encoders import load_checkpoint

    model = load_checkpoint(path)
    cfg = model.config
    n_floats = sum(int(t.data.size) for t in model.params.values())
    print(f"checkpoint {path}")
    print(f"  d_model={cfg.d_model} layers={cfg.n_layers} heads={cfg.n_heads} "
          f"image_side={cfg.image_side} patch={cfg.patch_size} "
          f"context={cfg.base_context}->{cfg.extended_context}")
    print(f"  vocab {len(model.vocab)} words, seed {model.seed}")
    print(f"  {len(model.params)} parameter tensors, {n_floats} floats")


def _inspect_gemb(path: Path) -> None:
    from .data import read_gemb

    ids, mat = read_gemb(path)
    print(f"gemb {path}")
    print(f"  {mat.shape[0]} embeddings, dim {mat.shape[1]}, {len(ids)} ids")
    preview = ", ".join(ids[:4])
    if preview:
        print(f"  first ids: {preview}")


def _inspect_pairs(path: Path) -> None:
    from .lism import read_pairs

    pairs = read_pairs(path)
    samples = {p.sample_id for p in pairs}
    print(f"pairs {path}")
    print(f"  {len(pairs)} local pairs across {len(samples)} samples")
    if pairs:
        mean_sim = sum(p.similarity for p in pairs) / len(pairs)
        print(f"  mean similarity {mean_sim:.4f}")


def _cmd_inspect(args, command):
    path = Path(args.path)
    if path.is_dir():
        _inspect_checkpoint(path)
    elif path.suffix == ".gemb":
        _require_file(args.path, "path")
        _inspect_gemb(path)
    elif path.suffix == ".jsonl":
        _require_file(args.path, "path")
        _inspect_pairs(path)
    elif not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    else:
        raise ValidationError(
            f"cannot inspect {path}: expected a checkpoint directory, "
            f"a .gemb file, or a .jsonl pairs file")
    return 0


# ---- parser ----


class _Parser(argparse.ArgumentParser):
    """Argparse variant whose usage errors match the ERROR-line contract."""

    def error(self, message):
        self.exit(2, f"ERROR 2: {message}\n")


def _add_train_flags(parser) -> None:
    parser.add_argument("--ablation", default="goal",
                        choices=("global_only", "local_only", "no_tsl", "goal"))
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--lambda-global", type=float, default=1.0)
    parser.add_argument("--lambda-local", type=float, default=0.5)
    parser.add_argument("--lambda-tsl", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="goal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("match", help="mine local pairs with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expand-frac", type=float, default=0.1)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("train", help="train one ablation configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", default=None)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="write a retrieval report CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("original", "joint"))
    p.add_argument("--pairs", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all four ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-data", default=None,
                   help="held-out dataset for the comparison tables")
    p.add_argument("--test-pairs", default=None,
                   help="pre-mined pairs for the joint table (default: mine "
                        "with the trained checkpoint)")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", default="tiny", choices=("tiny",))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("inspect", help="pretty-print an artifact header")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def _check_thread_env() -> None:
    value = os.environ.get("GOAL_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"GOAL_THREADS must be a positive integer, got {value!r}")
    if n < 1:
        raise ValidationError(f"GOAL_THREADS must be a positive integer, got {value!r}")


def main(argv: list[str] | None = None) -> int:
    command = list(sys.argv[1:] if argv is None else argv)
    try:
        _check_thread_env()
        try:
            args = build_parser().parse_args(command)
        except SystemExit as e:
            return int(e.code or 0)
        return args.func(args, command)
    except ValidationError as e:
        print(f"ERROR 2: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ERROR 3: {e}", file=sys.stderr)
        return 3
    except GoalError as e:
        print(f"ERROR 4: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
