import hashlib
import json
import logging
import os
import time
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .conf import get_settings

logger = logging.getLogger(__name__)


class HistoryCollector:
    """Collects per-epoch records and events during one training run"""

    def __init__(self, run_id: str):
        self.run_id = run_id
        self.run_data: Dict[str, Any] = {}
        self.epochs: List[Dict[str, Any]] = []
        self.events: List[Dict[str, Any]] = []
        self.started = time.perf_counter()

    def add_run_data(self, data: Dict[str, Any]):
        """Add run metadata (strategy, seed, trainable count, ...)"""
        self.run_data.update(data)

    def add_epoch(self, epoch: int, train_loss: float, val_loss: Optional[float], steps: int):
        self.epochs.append({
            'epoch': epoch,
            'train_loss': train_loss,
            'val_loss': val_loss,
            'steps': steps,
            'wall_time': time.perf_counter() - self.started,
        })

    def add_event(self, kind: str, **details):
        self.events.append({'kind': kind, 'epoch': len(self.epochs), **details})

    @property
    def train_losses(self) -> List[float]:
        return [record['train_loss'] for record in self.epochs]

    def finalize(self, final_data: Dict[str, Any]) -> Dict[str, Any]:
        """Finalize and return the complete history"""
        return {
            **self.run_data,
            **final_data,
            'epochs': self.epochs,
            'events': self.events,
            'wall_time': time.perf_counter() - self.started,
            'run_id': self.run_id,
        }


class MemoryProfiler:
    """Optional memray tracking of a whole run"""

    @staticmethod
    def should_profile_memory(requested: bool = False) -> bool:
        return requested or get_settings().memory_profile

    @staticmethod
    def default_output(label: str) -> str:
        directory = get_settings().memory_report_dir
        return os.path.join(directory, f"promptst-{label}-{os.getpid()}.bin")

    @staticmethod
    def profile_run(func: Callable, *args, output_file: Optional[str] = None, label: str = "run", **kwargs):
        """Run ``func`` under memray.Tracker when profiling is switched on"""
        if not MemoryProfiler.should_profile_memory(output_file is not None):
            return func(*args, **kwargs)

        try:
            import memray
        except ImportError:
            logger.warning("memray is not installed; running without memory profiling")
            return func(*args, **kwargs)

        output_file = output_file or MemoryProfiler.default_output(label)
        if os.path.exists(output_file):
            os.remove(output_file)
        with memray.Tracker(output_file):
            result = func(*args, **kwargs)
        logger.info(f"Memory profile written to {output_file} (render with: memray flamegraph {output_file})")
        return result


class ReportJSONEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if hasattr(obj, 'to_dict'):
            return obj.to_dict()
        return super().default(obj)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), cls=ReportJSONEncoder)


def config_hash(data: Dict[str, Any]) -> str:
    """Stable short hash of a configuration mapping"""
    return hashlib.md5(canonical_json(data).encode()).hexdigest()[:12]
