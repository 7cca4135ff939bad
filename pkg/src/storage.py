import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from src.exceptions import ValidationError, FormatError
from src.notifications import log_info, log_warning
from src.pointmap import PointAnnotation, annotations_to_json, load_annotations
from src.tensor_io import read_tensor, write_tensor

MANIFEST_FILE = 'manifest.json'
RECORDS_DIR = 'records'
TENSOR_SUFFIX = '.p2it'


def write_json(path: str, data: Any) -> None:
    """Sorted keys and fixed indentation keep repeated runs byte-identical."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


@dataclass
class DatasetRecord:
    """One synthesized scene and every tensor derived from it."""
    record_id: str
    stage: int
    class_tag: str
    tag_id: int
    tensors: Dict[str, np.ndarray]
    annotations: Optional[List[PointAnnotation]] = None
    scene: Dict[str, Any] = field(default_factory=dict)
    area_fraction: float = 0.0

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ValidationError(f"Record {self.record_id} has no tensor '{name}'",
                                  details={'available': sorted(self.tensors)})
        return self.tensors[name]

    @property
    def mask(self) -> np.ndarray:
        return self.tensor('mask')[..., 0].astype(np.uint8)


class DatasetStorage:
    """
    Dataset directory layout:
        manifest.json
        records/<record_id>/<name>.p2it
        records/<record_id>/annotations.json   (point-guided records only)
        records/<record_id>/scene.json
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(os.path.join(self.root, RECORDS_DIR), exist_ok=True)

    def record_dir(self, record_id: str) -> str:
        return os.path.join(self.root, RECORDS_DIR, record_id)

    def relpath(self, record_id: str, name: str) -> str:
        # Manifest refs always use forward slashes
        return f"{RECORDS_DIR}/{record_id}/{name}"

    def save_record(self, record: DatasetRecord) -> Dict[str, str]:
        """Write all tensors and metadata; returns {tensor name: relative file ref}."""
        directory = self.record_dir(record.record_id)
        os.makedirs(directory, exist_ok=True)
        refs = {}
        for name in sorted(record.tensors):
            filename = f"{name}{TENSOR_SUFFIX}"
            write_tensor(os.path.join(directory, filename), record.tensors[name])
            refs[name] = self.relpath(record.record_id, filename)
        if record.annotations is not None:
            with open(os.path.join(directory, 'annotations.json'), 'w', encoding='utf-8') as f:
                f.write(annotations_to_json(record.annotations))
                f.write('\n')
        write_json(os.path.join(directory, 'scene.json'), {
            'record_id': record.record_id,
            'stage': record.stage,
            'class_tag': record.class_tag,
            'tag_id': record.tag_id,
            'area_fraction': record.area_fraction,
            'scene': record.scene,
        })
        return refs

    def load_tensor(self, ref: str) -> np.ndarray:
        path = os.path.join(self.root, *ref.split('/'))
        if not os.path.exists(path):
            raise ValidationError(f"Missing tensor file {ref}", details={'root': self.root})
        try:
            return read_tensor(path)
        except FormatError as e:
            e.details['file'] = ref
            raise

    def load_record(self, record_id: str) -> DatasetRecord:
        directory = self.record_dir(record_id)
        meta_path = os.path.join(directory, 'scene.json')
        if not os.path.exists(meta_path):
            raise ValidationError(f"Record {record_id} not found under {self.root}")
        meta = read_json(meta_path)
        tensors = {}
        for filename in sorted(os.listdir(directory)):
            if filename.endswith(TENSOR_SUFFIX):
                tensors[filename[:-len(TENSOR_SUFFIX)]] = self.load_tensor(self.relpath(record_id, filename))
        annotations_path = os.path.join(directory, 'annotations.json')
        annotations = load_annotations(annotations_path) if os.path.exists(annotations_path) else None
        return DatasetRecord(
            record_id=record_id,
            stage=int(meta['stage']),
            class_tag=meta['class_tag'],
            tag_id=int(meta['tag_id']),
            tensors=tensors,
            annotations=annotations,
            scene=meta.get('scene', {}),
            area_fraction=float(meta.get('area_fraction', 0.0)),
        )

    def write_manifest(self, manifest: Dict[str, Any]) -> str:
        path = os.path.join(self.root, MANIFEST_FILE)
        write_json(path, manifest)
        log_info(f"Manifest written: {len(manifest.get('records', []))} records -> {path}")
        return path

    def load_manifest(self) -> Dict[str, Any]:
        """Load and check that every file ref resolves."""
        path = os.path.join(self.root, MANIFEST_FILE)
        if not os.path.exists(path):
            raise ValidationError(f"No manifest at {path}")
        try:
            manifest = read_json(path)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Manifest {path} is not valid JSON: {e}")
        for entry in manifest.get('records', []):
            for ref in entry.get('files', {}).values():
                if ref and not os.path.exists(os.path.join(self.root, *ref.split('/'))):
                    raise ValidationError(f"Manifest entry {entry.get('record_id')} refers to missing {ref}")
        return manifest

    def list_records(self) -> List[Dict[str, Any]]:
        return list(self.load_manifest().get('records', []))

    def load_scenes(self) -> List[DatasetRecord]:
        """Each distinct scene once, in manifest order."""
        seen = []
        for entry in self.list_records():
            scene_id = entry.get('scene_id', entry['record_id'])
            if scene_id not in seen:
                seen.append(scene_id)
        if not seen:
            log_warning(f"Dataset at {self.root} has no records")
        return [self.load_record(scene_id) for scene_id in seen]
