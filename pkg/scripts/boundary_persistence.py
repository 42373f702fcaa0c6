"""Exact fraction of pixels that sit on a patch border in every block,
for a 48x48 feature map under several patch schedules."""
from hpinet.patching import boundary_persistence

SCHEDULES = {
    "CPD 12,16,20,24": [12, 16, 20, 24],
    "fixed 12": [12] * 4,
    "fixed 18": [18] * 4,
}


def main():
    for label, sched in SCHEDULES.items():
        frac = boundary_persistence(48, 48, sched)
        print(f"{label}\t{frac.numerator}/{frac.denominator}\t{float(frac):.6f}")


if __name__ == "__main__":
    main()
