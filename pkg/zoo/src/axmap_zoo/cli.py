"""Command-line front end: export reference models, run the oracle interpreter."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportSpec, train_and_export
from .reference import ReferenceError, reference_infer


def cmd_export(args) -> int:
    spec = ExportSpec(architecture=args.arch, epochs=args.epochs,
                      seed=args.seed, out_dir=Path(args.out))
    result = train_and_export(spec)
    print(f"exported {result.model_path} and {result.dataset_path}")
    print(f"float accuracy {result.float_accuracy:.4f}, "
          f"exact-quantized accuracy {result.quantized_accuracy:.4f}")
    return 0


def cmd_reference(args) -> int:
    accuracies = reference_infer(args.model, args.dataset,
                                 mapping_path=args.mapping,
                                 batch_size=args.batch_size)
    for i, acc in enumerate(accuracies):
        print(f"batch {i:3d}: accuracy {100.0 * acc:7.3f}%")
    print(f"overall: accuracy {100.0 * accuracies.mean():.3f}% "
          f"over {accuracies.size} batches")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="axmap-zoo")
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="train, quantize, and export a model")
    p_export.add_argument("--arch", default="lenet-mnist",
                          choices=("lenet-mnist", "convnet-cifar10"))
    p_export.add_argument("--epochs", type=int, default=12)
    p_export.add_argument("--seed", type=int, default=0)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(func=cmd_export)

    p_ref = sub.add_parser("reference",
                           help="run the independent integer interpreter")
    p_ref.add_argument("--model", required=True)
    p_ref.add_argument("--dataset", required=True)
    p_ref.add_argument("--mapping", default=None)
    p_ref.add_argument("--batch-size", type=int, default=100)
    p_ref.set_defaults(func=cmd_reference)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ReferenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
