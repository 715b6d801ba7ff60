import json
import threading
from pathlib import Path

from loguru import logger

from utils import file_sha256

LEDGER_VERSION = 1


class StateManager:
    """JSON ledger of finished pipeline stages, their input hashes and artifact checksums."""

    def __init__(self, filepath="ledger.json"):
        self.filepath = Path(filepath)
        self.lock = threading.Lock()
        self.state = self.load_state()

    def load_state(self):
        try:
            with open(self.filepath, "r", encoding="utf-8") as f:
                state = json.load(f)
            if state.get("version") != LEDGER_VERSION or not isinstance(state.get("stages"), dict):
                raise ValueError("unexpected ledger layout")
            logger.info(f"Stage ledger loaded: {len(state['stages'])} record(s)")
            return state
        except (FileNotFoundError, json.JSONDecodeError, ValueError, AttributeError):
            logger.warning("Stage ledger missing or corrupt; starting fresh.")
            return {"version": LEDGER_VERSION, "stages": {}}

    def save_state(self):
        try:
            with self.lock:
                self.filepath.parent.mkdir(parents=True, exist_ok=True)
                with open(self.filepath, "w", encoding="utf-8") as f:
                    json.dump(self.state, f, indent=4, sort_keys=True)
        except OSError as e:
            logger.error(f"Failed to save stage ledger: {e}")

    def get(self, key, default=None):
        return self.state.get(key, default)

    def set(self, key, value):
        self.state[key] = value
        self.save_state()

    def stage(self, name):
        return self.state["stages"].get(name)

    def record_stage(self, name, input_hash, config_hash, artifacts):
        root = self.filepath.parent
        self.state["stages"][name] = {
            "input_hash": input_hash,
            "config_hash": config_hash,
            "artifacts": {str(Path(p).relative_to(root)): file_sha256(p) for p in sorted(map(str, artifacts))},
        }
        self.save_state()

    def forget_from(self, names):
        """Drops the records of the given stages (a stage that reruns invalidates the ones after it)."""
        for name in names:
            self.state["stages"].pop(name, None)
        self.save_state()

    def is_current(self, name, input_hash):
        record = self.stage(name)
        if record is None or record.get("input_hash") != input_hash:
            return False
        root = self.filepath.parent
        for rel, digest in record.get("artifacts", {}).items():
            path = root / rel
            if not path.exists() or file_sha256(path) != digest:
                logger.warning(f"Artifact {rel} of stage {name} changed or vanished; stage reruns")
                return False
        return True
