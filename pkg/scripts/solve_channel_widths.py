"""Pick C for the S/M/L variants by matching count_params to the published
parameter budgets (K = 8, scale 4, default CPD schedule)."""
from hpinet.config import HpiConfig
from hpinet.model import count_params

TARGETS = {"S": 0.46e6, "M": 0.90e6, "L": 1.44e6}


def main():
    print("variant\tC\tparams\ttarget\trel_err")
    for name, target in TARGETS.items():
        best = min(range(8, 160), key=lambda c: abs(count_params(HpiConfig(channels=c)) - target))
        n = count_params(HpiConfig(channels=best))
        print(f"{name}\t{best}\t{n}\t{int(target)}\t{(n - target) / target:+.4f}")


if __name__ == "__main__":
    main()
