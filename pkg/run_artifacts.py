"""
Output directory handling for a single command run.

Every file is written to a temporary sibling first and moved into place, so a
crashed run never leaves a half-written artifact behind.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + '.tmp')
    with open(temp_file, 'wb') as f:
        f.write(payload)
    temp_file.replace(path)
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def to_json(document: Union[BaseModel, Dict[str, Any]]) -> str:
    if isinstance(document, BaseModel):
        document = document.model_dump(mode='json')
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


class RunArtifacts:
    """Writes the JSON and CSV outputs of one run into its output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_json(self, name: str, document: Union[BaseModel, Dict[str, Any]]) -> Path:
        path = atomic_write_text(self.path(name), to_json(document))
        logger.debug(f"Wrote {path}")
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        # floats keep full repr precision
        path = atomic_write_text(self.path(name), frame.to_csv(index=False, lineterminator="\n"))
        logger.debug(f"Wrote {path} ({len(frame)} rows)")
        return path

