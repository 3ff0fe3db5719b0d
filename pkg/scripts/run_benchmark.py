"""Default benchmark run: teacher vs SSMB student on cross-modal dev probes."""
import argparse
import tempfile

from ssmb.experiments import PipelineConfig, expert_table, loss_drop, relative_reduction, run_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--experts", type=int, nargs="+", default=[4])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--workdir", default=None)
    a = p.parse_args()

    cfg = PipelineConfig(seed=a.seed)
    cfg.train.epochs = a.epochs
    with tempfile.TemporaryDirectory() as tmp:
        res = run_pipeline(cfg, a.workdir or tmp, a.experts)
    t = res.teacher_report
    print(expert_table(res))
    for n, (_, runlog, rep) in sorted(res.students.items()):
        print(f"N={n} aggregate EER reduction {relative_reduction(t.eer, rep.eer):+.1%}")
        th, st = t.per_modality["thermal"].eer, rep.per_modality["thermal"].eer
        print(f"N={n} thermal EER {th:.2f} -> {st:.2f} ({relative_reduction(th, st):+.1%})")
        print(f"N={n} epoch-mean loss drop {loss_drop(runlog):.1%}")
    print(f"total {res.seconds:.0f} s")


if __name__ == "__main__":
    main()
