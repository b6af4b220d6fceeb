"""Print 3-seed means for the acceptance grids cached under results/acceptance.

Populate the cache first with ``python tests/acceptance_runs.py``.
"""
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_runs as AR  # noqa: E402
from ssl_lab import data, train  # noqa: E402


def label(cfg):
    thr = cfg["ssl"]["eta_cbm_per_class"].get("cardiac_*") if cfg["mode"] == "ssl" else None
    return (cfg["mode"], cfg["labelled_per_class"], cfg["include_background"], thr)


def main():
    ds = data.generate(data.DatasetSpec())
    groups = defaultdict(list)
    for name, base, axes in AR.grids():
        for cfg in train.expand_grid(base, axes, AR.REPLICATES):
            run_dir = AR.cache_dir(ds) / "runs" / cfg.config_hash()
            if (run_dir / "record.json").exists():
                rec = train.RunRecord.load(run_dir)
                if rec.status == "ok":
                    groups[label(rec.config)].append(rec)
    print(f"{'mode':<11}{'budget':>7}{'bg':>6}{'cardiac':>9}{'n':>3}{'overall':>9}{'grouped':>9}{'distinct':>9}{'secs':>7}")
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], str(k[3]))):
        recs = groups[key]
        ov = np.mean([r.report.overall_accuracy_anatomical for r in recs])
        gr = np.mean([r.report.grouped_cluster_accuracy for r in recs])
        di = np.mean([r.report.distinct_recall() for r in recs])
        secs = np.mean([r.wall_clock for r in recs])
        mode, budget, bg, thr = key
        print(f"{mode:<11}{budget:>7}{str(bg):>6}{str(thr):>9}{len(recs):>3}{ov:>9.4f}{gr:>9.4f}{di:>9.4f}{secs:>7.0f}")


if __name__ == "__main__":
    main()
