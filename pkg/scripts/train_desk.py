"""Desk-scale teacher training followed by distillation into a 1-block student.

    python3 scripts/train_desk.py --out runs/desk
    python3 scripts/train_desk.py --out runs/desk --teacher-steps 2000 --student-steps 500
"""
import argparse
import json
from pathlib import Path

import numpy as np

from e3net import nnops
from e3net.data import make_dataset
from e3net.runner import RunConfig, run_training
from e3net.train import FrozenModel, evaluate_si_sdr

TRAIN = {"seed": 100, "n_items": 200, "seconds": 2.0, "scenario": "TS2", "n_speakers": 20}
HELD_OUT = {"seed": 200, "n_items": 20, "seconds": 2.0, "scenario": "TS2", "n_speakers": 20}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--teacher-steps", type=int, default=20000)
    ap.add_argument("--student-steps", type=int, default=5000)
    ap.add_argument("--regime", default="KDonSup", help="distillation regime for the student")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--resume", action="store_true")
    ap.add_argument("--no-remix", dest="remix", action="store_false",
                    help="train the teacher on the fixed mixtures only")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    sched = {"peak_lr": args.lr, "warmup_steps": 200}
    tcfg = RunConfig(regime="supervisedSE", preset="small", synthetic=TRAIN, remix=args.remix,
                     schedule={**sched, "total_steps": args.teacher_steps})
    teacher = run_training(tcfg, args.out / "teacher.e3n", resume=args.resume)

    ev = make_dataset(emb_dim=teacher.config.emb_dim, **HELD_OUT)
    base = float(np.mean(nnops.si_sdr(ev.noisy, ev.clean)))
    t_score = float(np.mean(evaluate_si_sdr(teacher.params, teacher.config, ev.noisy, ev.clean, ev.embeddings)))
    print(f"teacher: held-out SI-SDR {t_score:.2f} dB (noisy {base:.2f} dB, gain {t_score - base:.2f} dB)")

    scfg = RunConfig(regime=args.regime, preset="small-student", teacher=str(teacher.checkpoint),
                     synthetic=TRAIN, seed=1, schedule={**sched, "total_steps": args.student_steps})
    student = run_training(scfg, args.out / "student.e3n", resume=args.resume)
    frozen = FrozenModel(teacher.params, teacher.config)
    s_clean = float(np.mean(evaluate_si_sdr(student.params, student.config, ev.noisy, ev.clean, ev.embeddings)))
    s_vs_t = float(np.mean(evaluate_si_sdr(student.params, student.config, ev.noisy,
                                           frozen(ev.noisy, ev.embeddings), ev.embeddings)))
    print(f"student: held-out SI-SDR {s_clean:.2f} dB, vs teacher output {s_vs_t:.2f} dB")
    summary = {"noisy_si_sdr": base, "teacher_si_sdr": t_score, "student_si_sdr": s_clean,
               "student_vs_teacher": s_vs_t}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
