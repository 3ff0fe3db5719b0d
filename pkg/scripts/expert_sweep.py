"""Train students with N = 1..5 experts and print the comparison table."""
import argparse
import tempfile

from ssmb.experiments import PipelineConfig, expert_table, run_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--experts", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--epochs", type=int, default=50)
    a = p.parse_args()
    cfg = PipelineConfig(seed=a.seed)
    cfg.train.epochs = a.epochs
    with tempfile.TemporaryDirectory() as tmp:
        res = run_pipeline(cfg, tmp, a.experts)
    print(expert_table(res), end="")


if __name__ == "__main__":
    main()
