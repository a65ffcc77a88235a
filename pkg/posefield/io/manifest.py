"""
Dataset manifests.

A manifest is a JSON document (schema 1) next to its frames:

    {"schema": 1, "name": ..., "near": ..., "far": ...,
     "frames": [{"id", "image", "depth"?, "mask"?, "pose"?, "gt_pose"?,
                 "intrinsics", "split", "scale", "view"}],
     "pairs"?: [[i, j], ...], "relatives"?: [[w, x, y, z], ...],
     "extras": {...}}

Images are PPM, depth maps PFM and masks PGM; paths are relative to the
manifest directory.
"""
import os
import json
import logging
import numpy as np
from typing import Dict, List, Optional
from posefield.core.geom import RigidTransform
from posefield.core.geom import CameraIntrinsics
from posefield.core.scene import Frame
from posefield.core.scene import ScenePackage
from posefield.io import codecs

logger = logging.getLogger(__name__)

SCHEMA        = 1
MANIFEST_NAME = 'manifest.json'


def _frame_error(frame_id: str, e: Exception) -> Exception:
    if isinstance(e, FileNotFoundError):
        return FileNotFoundError(f'Frame {frame_id}: {e}')
    return ValueError(f'Frame {frame_id}: {e}')


def _load_frame(record: Dict, root: str) -> Frame:
    frame_id = str(record.get('id', '?'))
    try:
        image = codecs.to_float(codecs.read_ppm(os.path.join(root, record['image'])))
        depth = codecs.read_pfm(os.path.join(root, record['depth'])).astype(np.float64) if record.get('depth') else None
        mask  = codecs.read_pgm(os.path.join(root, record['mask'])) > 127 if record.get('mask') else None
        pose  = RigidTransform.from_json(record['pose']) if record.get('pose') else None
        K     = CameraIntrinsics.from_json(record['intrinsics'])
        return Frame(frame_id, image, K, pose, depth, mask, record.get('split', 'train'),
                     int(record.get('scale', 1)), record.get('view', ''))
    except (ValueError, FileNotFoundError) as e:
        raise _frame_error(frame_id, e) from e
    except (KeyError, TypeError) as e:
        raise ValueError(f'Frame {frame_id}: malformed record ({e})') from e


def load_manifest(path: str) -> ScenePackage:
    """ Parse a manifest and every file it references """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f'Manifest not found: {path}')
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f'{path}: malformed manifest: {e}') from e
    if doc.get('schema') != SCHEMA:
        raise ValueError(f'{path}: unsupported schema {doc.get("schema")!r}, expected {SCHEMA}')
    records = doc.get('frames') or []
    if not records:
        raise ValueError(f'{path}: manifest lists no frames')

    root   = os.path.dirname(os.path.abspath(path))
    frames = [_load_frame(r, root) for r in records]
    gt: Optional[List[RigidTransform]] = None
    if all(r.get('gt_pose') for r in records):
        gt = [RigidTransform.from_json(r['gt_pose']) for r in records]
    elif any(r.get('gt_pose') for r in records):
        logger.warning('%s: ground truth given for some frames only; ignored', path)

    scene = ScenePackage(frames, float(doc['near']), float(doc['far']), gt,
                         doc.get('pairs'), doc.get('relatives'), doc.get('name', 'scene'), doc.get('extras', {}))
    logger.info('Loaded %s: %d frames', path, len(frames))
    return scene


def manifest_document(scene: ScenePackage) -> Dict:
    frames = []
    for k, f in enumerate(scene.frames):
        record = {
            'id':         f.frame_id,
            'image':      f'images/{f.frame_id}.ppm',
            'intrinsics': f.intrinsics.to_json(),
            'split':      f.split,
            'scale':      f.scale,
            'view':       f.view,
        }
        if f.depth is not None:
            record['depth'] = f'depth/{f.frame_id}.pfm'
        if f.mask is not None:
            record['mask'] = f'masks/{f.frame_id}.pgm'
        if f.pose is not None:
            record['pose'] = f.pose.to_json()
        if scene.ground_truth is not None:
            record['gt_pose'] = scene.ground_truth[k].to_json()
        frames.append(record)

    doc = {'schema': SCHEMA, 'name': scene.name, 'near': scene.near, 'far': scene.far,
           'frames': frames, 'extras': scene.extras}
    if scene.pairs is not None:
        doc['pairs']     = scene.pairs.tolist()
        doc['relatives'] = scene.relatives.tolist()
    return doc


def save_manifest(scene: ScenePackage, directory: str) -> str:
    """ Write frames and manifest under `directory`; returns the manifest path """
    for f in scene.frames:
        codecs.write_ppm(os.path.join(directory, 'images', f'{f.frame_id}.ppm'), codecs.to_uint8(f.image))
        if f.depth is not None:
            codecs.write_pfm(os.path.join(directory, 'depth', f'{f.frame_id}.pfm'), f.depth)
        if f.mask is not None:
            codecs.write_pgm(os.path.join(directory, 'masks', f'{f.frame_id}.pgm'),
                             np.where(f.mask, 255, 0).astype(np.uint8))
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w') as out:
        json.dump(manifest_document(scene), out, indent=2, sort_keys=True)
        out.write('\n')
    logger.info('Wrote %s: %d frames', path, len(scene.frames))
    return path
