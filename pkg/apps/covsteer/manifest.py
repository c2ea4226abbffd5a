"""
covsteer - Run Manifest
Provenance record written before any other artifact of a CLI command.
"""

import hashlib
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

from . import serialization


MANIFEST_NAME = "manifest.json"


def hash_bytes(data: bytes) -> str:
    return hashlib.sha3_256(data).hexdigest()


def hash_file(path: Union[str, Path]) -> str:
    """SHA3-256 of a file's bytes."""
    return hash_bytes(Path(path).read_bytes())


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    tool_version: str
    out_dir: str
    config_path: Optional[str] = None
    config_sha3_256: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)
    master_seed: Optional[int] = None
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    exit_code: Optional[int] = None

    @classmethod
    def create(cls, command: str, out_dir: Union[str, Path], config_path: Optional[Union[str, Path]] = None,
               settings: Optional[Dict[str, Any]] = None, master_seed: Optional[int] = None,
               inputs: Optional[Dict[str, Union[str, Path]]] = None) -> "RunManifest":
        """
        Build a manifest, hashing the config and every extra input file.

        Args:
            command: CLI command name
            out_dir: Artifact directory
            config_path: Problem document (hashed when given)
            settings: Effective settings of the run
            master_seed: Seed of the run, if any
            inputs: Additional input files, name -> path

        Returns:
            RunManifest with start timestamp set
        """
        from . import __version__

        hashed = {name: hash_file(p) for name, p in (inputs or {}).items()}
        return cls(
            command=command,
            tool_version=__version__,
            out_dir=str(out_dir),
            config_path=str(config_path) if config_path is not None else None,
            config_sha3_256=hash_file(config_path) if config_path is not None else None,
            inputs=hashed,
            settings=dict(settings or {}),
            master_seed=master_seed,
        )

    def write(self, out_dir: Optional[Union[str, Path]] = None) -> Path:
        return serialization.write_json(Path(out_dir or self.out_dir) / MANIFEST_NAME, asdict(self))

    def finish(self, exit_code: int) -> Path:
        self.finished_at = utc_now()
        self.exit_code = exit_code
        return self.write()

    def verify_config(self) -> bool:
        """True when the config file still matches the recorded hash."""
        if self.config_path is None:
            return self.config_sha3_256 is None
        return hash_file(self.config_path) == self.config_sha3_256
