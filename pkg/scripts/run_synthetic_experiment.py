#!/usr/bin/env python3
"""Run the committed synthetic experiment and its centralized twin.

Executes the federated distillation config through the CLI, then trains
the same student centrally on the pooled corpus with the same total
step budget, and prints a side-by-side accuracy table. Pass a different
config to reproduce other setups.
"""

import argparse
import sys
import time
from pathlib import Path

import torch

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from fedukd import cli  # noqa: E402
from fedukd.config import ExperimentConfig  # noqa: E402
from fedukd.federation import (  # noqa: E402
    evaluate_mean_iou,
    evaluate_pixel_accuracy,
    run_centralized,
)
from fedukd.models import load_weights  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config",
        default=str(REPO_ROOT / "configs" / "synthetic_fed_ukd.yaml"),
        help="experiment config (default: the committed synthetic setup)",
    )
    parser.add_argument("--out", default="runs/synthetic_experiment")
    parser.add_argument("--seed", type=int, help="override the experiment seed")
    parser.add_argument(
        "--skip-central", action="store_true", help="only run the federated side"
    )
    args = parser.parse_args()
    torch.set_num_threads(max(1, torch.get_num_threads()))

    cli_args = ["run", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        cli_args += ["--seed", str(args.seed)]
    started = time.monotonic()
    code = cli.main(cli_args)
    if code != 0:
        return code
    fed_seconds = time.monotonic() - started

    config = ExperimentConfig.from_file(args.config).with_overrides(
        seed=args.seed, out=args.out
    )
    train, val, num_classes = cli._load_corpora(config)
    student_spec = config.student.to_spec(num_classes)
    out_dir = Path(args.out)
    student = load_weights(out_dir / "weights" / "final.weights", student_spec)
    rows = [
        (
            "federated",
            evaluate_pixel_accuracy(student, val, batch_size=config.federation.batch_size),
            evaluate_mean_iou(student, val, batch_size=config.federation.batch_size),
            fed_seconds,
        )
    ]

    if not args.skip_central:
        teacher = None
        teacher_path = out_dir / "teacher.weights"
        if teacher_path.is_file():
            teacher = load_weights(teacher_path, config.teacher.to_spec(num_classes))
        budget = config.federation.rounds * config.federation.local_epochs
        started = time.monotonic()
        central, _ = run_centralized(
            config.federation, train, student_spec, epochs=budget, teacher=teacher
        )
        rows.append(
            (
                "centralized",
                evaluate_pixel_accuracy(central, val, batch_size=config.federation.batch_size),
                evaluate_mean_iou(central, val, batch_size=config.federation.batch_size),
                time.monotonic() - started,
            )
        )

    print()
    print(f"{'setup':<12} {'pixel acc':>10} {'mean IoU':>10} {'seconds':>9}")
    for label, accuracy, miou, seconds in rows:
        print(f"{label:<12} {accuracy:>10.4f} {miou:>10.4f} {seconds:>9.1f}")
    if len(rows) == 2:
        gap = (rows[1][1] - rows[0][1]) * 100
        print(f"\ncentralized minus federated: {gap:+.2f} accuracy points")
    print(f"outputs under {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
