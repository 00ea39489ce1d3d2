"""Trained artifacts shared by the end-to-end acceptance checks.

Training the desk-scale models takes tens of minutes on one core, so the
checkpoints and metric logs are cached on disk, keyed by the full run
configuration. Delete the cache directory (or set TSNET_ACCEPT_CACHE to a
fresh path) to force a retrain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from tsnet.data import Dataset, DatasetConfig, build_dataset
from tsnet.network import NetworkConfig
from tsnet.training import Checkpoint, TrainConfig, train, write_metric_log

ARTIFACT_VERSION = 1
CACHE = Path(os.environ.get("TSNET_ACCEPT_CACHE", Path(__file__).resolve().parent.parent / ".tsnet_cache"))

DATASET = DatasetConfig()  # 12 letters + space, 3 styles x 3 TSI x 300 lines
TRAIN = TrainConfig(iterations=20000, eval_every=2000, seed=0)

log = logging.getLogger(__name__)


@dataclass
class TrainedRun:
    checkpoint: Checkpoint
    log_path: Path
    seconds: float


def dataset() -> Dataset:
    return build_dataset(DATASET)


def _key(net: NetworkConfig) -> str:
    blob = json.dumps({"v": ARTIFACT_VERSION, "data": DATASET.to_dict(), "net": net.to_dict(),
                       "train": TRAIN.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trained(head_mode: str, ds: Dataset | None = None) -> TrainedRun:
    net = NetworkConfig(num_classes=len(DATASET.alphabet) + 1, head_mode=head_mode)
    root = CACHE / f"{head_mode}-{_key(net)}"
    ckpt_path, log_path, meta_path = root / "model.tsnf", root / "metrics.csv", root / "run.json"
    if ckpt_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return TrainedRun(Checkpoint.load(ckpt_path), log_path, meta["seconds"])
    ds = ds or dataset()
    root.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = train(ds, net, TRAIN)
    seconds = time.perf_counter() - start
    write_metric_log(log_path, result.log)
    result.checkpoint.save(ckpt_path)
    meta_path.write_text(json.dumps({"seconds": seconds, "head_mode": head_mode}))
    return TrainedRun(result.checkpoint, log_path, seconds)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ds = dataset()
    for mode in ("tsb", "frn_baseline"):
        run = trained(mode, ds)
        print(mode, f"{run.seconds:.0f}s")
