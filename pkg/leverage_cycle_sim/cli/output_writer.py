import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional

import pandas as pd

from leverage_cycle_sim import __version__
from leverage_cycle_sim.common.exceptions import LeverageCycleError
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.common.run_config import RunConfig, parse_config, serialize_config
from leverage_cycle_sim.model.core import TRAJECTORY_COLUMNS, Trajectory

logger = get_logger(__name__)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: str
    seed: int
    version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    status: str = "running"
    outputs: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def resolved_config(self) -> RunConfig:
        """The config this run used, parsed back from the manifest."""
        return parse_config(self.config)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def frame_to_csv(frame: pd.DataFrame) -> str:
    """CSV text with reals in shortest round-trip form."""
    return frame.to_csv(index=False, lineterminator="\n")


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to a temporary sibling file and move it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        handle, temp_path = tempfile.mkstemp(dir=directory, prefix=".partial-")
        try:
            with os.fdopen(handle, "w", newline="") as f:
                f.write(text)
            os.replace(temp_path, path)
        except BaseException:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise LeverageCycleError(f"cannot write {path}: {e.strerror}") from e


def write_trajectory_csv(traj: Trajectory, path: str) -> None:
    atomic_write_text(path, frame_to_csv(traj.to_frame()))


def read_trajectory_csv(path: str) -> pd.DataFrame:
    """Read a trajectory CSV back with exact float parsing."""
    frame = pd.read_csv(path, float_precision="round_trip")
    if tuple(frame.columns) != TRAJECTORY_COLUMNS:
        raise LeverageCycleError(f"{path}: unexpected trajectory header {list(frame.columns)}")
    return frame


class OutputWriter:
    """Collects a command's result tables and writes them only once the command succeeded."""

    def __init__(self, out_dir: str, manifest: RunManifest) -> None:
        self.out_dir = out_dir
        self.manifest = manifest
        self._pending: Dict[str, str] = {}

    def add_frame(self, name: str, frame: pd.DataFrame) -> str:
        """
        Stage a table for writing.

        Args:
            name (str): File name relative to the output directory.
            frame (pd.DataFrame): The table to write.

        Returns:
            str: The path the table will be written to.
        """
        path = os.path.join(self.out_dir, name)
        self._pending[path] = frame_to_csv(frame)
        return path

    def add_trajectory(self, name: str, traj: Trajectory) -> str:
        return self.add_frame(name, traj.to_frame())

    def commit(self, manifest_name: str, status: str = "ok") -> List[str]:
        """Write every staged table, then the manifest listing them."""
        written = []
        try:
            for path, text in self._pending.items():
                atomic_write_text(path, text)
                written.append(path)
        except LeverageCycleError:
            for path in written:
                os.remove(path)
            raise
        self.manifest.status = status
        self.manifest.outputs = [os.path.basename(p) for p in written]
        manifest_path = os.path.join(self.out_dir, manifest_name)
        atomic_write_text(manifest_path, self.manifest.to_json())
        logger.info(f"Wrote {len(written)} table(s) and manifest to {self.out_dir}")
        return written + [manifest_path]


def new_manifest(command: str, argv: List[str], config: RunConfig, started_at: Optional[str] = None) -> RunManifest:
    manifest = RunManifest(command=command, argv=list(argv), config=serialize_config(config), seed=config.seed)
    if started_at is not None:
        manifest.started_at = started_at
    return manifest
