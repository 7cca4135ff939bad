"""
Denoiser checkpoints
One P2IT file per parameter group and optimizer moment, plus index.json
"""

import json
import os
import shutil
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from src.config_manager import DenoiserConfig
from src.denoiser import DenoiserParams, OptimizerState, parameter_shapes
from src.exceptions import CheckpointError, FormatError, ShapeError, ValidationError
from src.notifications import log_info, log_warning, log_error
from src.storage import write_json, read_json
from src.tensor_io import header_size, read_tensor, write_tensor

INDEX_FILE = 'index.json'
BACKUP_INDEX_FILE = 'index_backup.json'
CHECKPOINT_FORMAT = 1


@dataclass
class Checkpoint:
    params: DenoiserParams
    opt_state: Optional[OptimizerState] = None
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    codec_seed: int = 0


def save_checkpoint(directory: str, params: DenoiserParams, opt_state: Optional[OptimizerState] = None,
                    snapshot: Optional[Dict[str, Any]] = None, seed: int = 0,
                    codec_seed: Optional[int] = None) -> str:
    """Save parameters (and optimizer moments) with backup of any previous index."""
    os.makedirs(directory, exist_ok=True)
    index_path = os.path.join(directory, INDEX_FILE)

    # Create backup before overwriting
    if os.path.exists(index_path):
        shutil.copy2(index_path, os.path.join(directory, BACKUP_INDEX_FILE))
        log_info("Checkpoint index backup created")

    groups = []
    for name, value in params.items():
        entry = {
            'name': name,
            'file': f"{name}.p2it",
            'dims': list(value.shape),
            'offset': header_size(value.ndim),
            'm': None,
            'v': None,
        }
        write_tensor(os.path.join(directory, entry['file']), value)
        if opt_state is not None:
            entry['m'] = f"m_{name}.p2it"
            entry['v'] = f"v_{name}.p2it"
            write_tensor(os.path.join(directory, entry['m']), opt_state.m[name])
            write_tensor(os.path.join(directory, entry['v']), opt_state.v[name])
        groups.append(entry)

    config = params.config
    write_json(index_path, {
        'format': CHECKPOINT_FORMAT,
        'seed': int(seed),
        'codec_seed': int(seed if codec_seed is None else codec_seed),
        'step': int(opt_state.step) if opt_state is not None else 0,
        'denoiser': {'width': config.width, 'depth': config.depth, 'num_tags': config.num_tags},
        'config': snapshot or {},
        'groups': groups,
    })
    log_info(f"Checkpoint saved: {params.num_parameters()} parameters -> {directory}")
    return index_path


def _read_index(directory: str) -> Dict[str, Any]:
    index_path = os.path.join(directory, INDEX_FILE)
    try:
        return read_json(index_path)
    except (OSError, json.JSONDecodeError) as e:
        log_warning(f"Error loading checkpoint index: {e}, trying backup...")
        backup_path = os.path.join(directory, BACKUP_INDEX_FILE)
        if os.path.exists(backup_path):
            try:
                index = read_json(backup_path)
                log_info("Restored checkpoint index from backup")
                return index
            except (OSError, json.JSONDecodeError) as backup_e:
                log_error(f"Backup restoration failed: {backup_e}")
        raise CheckpointError(f"No readable checkpoint index in {directory}")


def _load_group(directory: str, filename: str, dims) -> np.ndarray:
    path = os.path.join(directory, filename)
    try:
        array = read_tensor(path)
    except (OSError, FormatError) as e:
        raise CheckpointError(f"Cannot read {filename}: {e}")
    if list(array.shape) != list(dims):
        raise CheckpointError(f"{filename} has dims {list(array.shape)}, index says {list(dims)}")
    return array.astype(np.float64)


def load_checkpoint(directory: str) -> Checkpoint:
    if not os.path.isdir(directory):
        raise CheckpointError(f"Checkpoint directory not found: {directory}")
    index = _read_index(directory)
    if index.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {index.get('format')}")

    try:
        config = DenoiserConfig(**index['denoiser'])
        config.validate()
    except (KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"Checkpoint architecture is invalid: {e}")
    expected = parameter_shapes(config)

    tensors, m, v = {}, {}, {}
    for entry in index.get('groups', []):
        name = entry['name']
        if name not in expected:
            raise CheckpointError(f"Unexpected parameter group '{name}'")
        tensors[name] = _load_group(directory, entry['file'], entry['dims'])
        if entry.get('m') and entry.get('v'):
            m[name] = _load_group(directory, entry['m'], entry['dims'])
            v[name] = _load_group(directory, entry['v'], entry['dims'])

    try:
        params = DenoiserParams(config, tensors)
    except (ValidationError, ShapeError) as e:
        raise CheckpointError(f"Checkpoint in {directory} is incomplete: {e}")
    opt_state = OptimizerState(m, v, int(index.get('step', 0))) if len(m) == len(params) else None
    return Checkpoint(params=params, opt_state=opt_state, config=index.get('config', {}),
                      seed=int(index.get('seed', 0)), codec_seed=int(index.get('codec_seed', index.get('seed', 0))))
