"""Print ESResNet parameter counts from the closed-form table and from a built model."""
import argparse

from escnet.esresnet import ModelConfig, build, parameter_count


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, nargs="+", default=[1000, 50, 10])
    ap.add_argument("--width-scale", type=float, default=1.0)
    ap.add_argument("--skip-build", action="store_true", help="formula only (building width 1 takes ~1 s and ~200 MB)")
    args = ap.parse_args()
    print("classes\tattention\tformula\tbuilt")
    for k in args.classes:
        for att in (False, True):
            cfg = ModelConfig(k, attention=att, width_scale=args.width_scale)
            built = "-" if args.skip_build else f"{build(cfg).num_parameters():,}"
            print(f"{k}\t{att}\t{parameter_count(cfg):,}\t{built}")


if __name__ == "__main__":
    main()
