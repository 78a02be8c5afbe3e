#!/usr/bin/env python3
"""Print the teacher-vs-student compression table for a class count.

Sizes come from exact parameter counts and serialized container bytes,
so the table is reproducible to the digit on any machine.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedukd.metrics import compression_report  # noqa: E402
from fedukd.models import (  # noqa: E402
    ModelSpec,
    default_teacher_spec,
    initialize_weights,
)

# Student widths worth comparing: the default compact pair plus two
# wider variants landing near 270K and 1M parameters at 30 classes.
STUDENT_WIDTHS = (
    ("default", (16, 32), (32, 16)),
    ("compact", (24, 48), (48, 24)),
    ("midsize", (48, 96), (96, 48)),
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--classes", type=int, default=30, help="number of output classes")
    args = parser.parse_args()

    teacher = initialize_weights(default_teacher_spec(args.classes), 0)
    print(f"classes: {args.classes}")
    print(
        f"{'student':<10} {'params':>12} {'bytes':>12} "
        f"{'param ratio':>12} {'space ratio':>12}"
    )
    for label, encoder, decoder in STUDENT_WIDTHS:
        spec = ModelSpec(
            in_channels=3,
            num_classes=args.classes,
            encoder_filters=encoder,
            decoder_filters=decoder,
        )
        student = initialize_weights(spec, 0)
        report = compression_report(teacher, student)
        print(
            f"{label:<10} {report.student_parameters:>12,} {report.student_bytes:>12,} "
            f"{report.parameter_ratio:>12.2f} {report.space_ratio:>12.2f}"
        )
    print(
        f"{'teacher':<10} {report.teacher_parameters:>12,} {report.teacher_bytes:>12,} "
        f"{1.0:>12.2f} {1.0:>12.2f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
