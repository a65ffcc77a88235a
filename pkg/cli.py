#!/usr/bin/env python3

import os
import sys
import csv
import json
import math
import logging
import argparse
import platform
import numpy as np
import scipy
import threadpoolctl
from threadpoolctl import threadpool_limits
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
import posefield
from posefield.config.config import logo
from posefield.config.config import RunConfig
from posefield.config.config import load_config
from posefield.config.config import config_hash
from posefield.config.config import run_variants
from posefield.config.config import section_config
from posefield.core.geom import RigidTransform
from posefield.core.viewgraph import CorpusEntry
from posefield.core.viewgraph import SyntheticGraph
from posefield.core.viewgraph import SyntheticGraphSpec
from posefield.core.viewgraph import generate_corpus
from posefield.core.viewgraph import rotation_errors_deg
from posefield.core.avg import RobustLossConfig
from posefield.core.avg import align_pose_sets
from posefield.core.mra import MraConfig
from posefield.core.mra import MpnnParams
from posefield.core.mra import evaluate
from posefield.core.mra import pretrain
from posefield.core.mra import prepare_graph
from posefield.core.mra import metrics_columns
from posefield.core.field import FieldConfig
from posefield.core.field import RadianceField
from posefield.core.field import encoding_at
from posefield.core.field import render_image
from posefield.core.depth import DepthConfig
from posefield.core.scene import SceneConfig
from posefield.core.scene import ScenePackage
from posefield.core.scene import build_toy_scene
from posefield.core.pipeline import JointTrainer
from posefield.core.pipeline import ScheduleConfig
from posefield.core.pipeline import run_eval
from posefield.core.pipeline import eval_columns
from posefield.core.pipeline import perturb_poses
from posefield.core.pipeline import evaluate_result
from posefield.core.pipeline import compare_averaging
from posefield.core.pipeline import map_into_estimate
from posefield.core.pipeline import refine_view_graph
from posefield.io import codecs
from posefield.io.graphs import save_poses
from posefield.io.graphs import load_poses
from posefield.io.graphs import save_graphs
from posefield.io.graphs import load_graphs
from posefield.io.graphs import corpus_records
from posefield.io.graphs import save_corpus_manifest
from posefield.io.manifest import load_manifest
from posefield.io.manifest import save_manifest
from posefield.io.checkpoint import save_checkpoint
from posefield.io.checkpoint import load_checkpoint

logger = logging.getLogger('posefield')

thread_variables = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')
RUN_FILE     = 'run.json'
METRICS_FILE = 'metrics.json'
ROWS_FILE    = 'rows.csv'


class RunContext(NamedTuple):
    config: Dict
    run:    RunConfig
    seed:   int
    out:    str


# ------------------------------------------------------------------------------
# helpers
def parse_range(kind):
    """ argparse type for `lo:hi` """
    def parse(text: str) -> Tuple:
        parts = text.split(':')
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f'Expected lo:hi, got "{text}"')
        try:
            lo, hi = kind(parts[0]), kind(parts[1])
        except ValueError as e:
            raise argparse.ArgumentTypeError(f'Invalid range "{text}": {e}')
        if lo > hi:
            raise argparse.ArgumentTypeError(f'Empty range "{text}"')
        return lo, hi
    return parse


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_json(path: str, doc: Dict) -> None:
    with open(path, 'w') as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=format_value)
        f.write('\n')


def write_metrics(ctx: RunContext, metrics: Dict, columns: Optional[Sequence[str]] = None,
                  rows: Optional[Sequence[Sequence]] = None) -> None:
    write_json(os.path.join(ctx.out, METRICS_FILE), {k: v for k, v in metrics.items() if v is not None})
    if columns is not None:
        write_csv(os.path.join(ctx.out, ROWS_FILE), columns, rows)


def apply_threads(threads: int) -> int:
    """ Cap the thread pools of the loaded numerical libraries and of any child process """
    threads = threads or os.cpu_count() or 1
    for name in thread_variables:
        os.environ[name] = str(threads)
    threadpool_limits(limits=threads)
    return threads


def setup_run(args, command: str) -> RunContext:
    config = load_config(args.variant, args.config, args.verbose)
    if args.seed is not None:
        config['run_seed'] = args.seed
    if args.threads is not None:
        config['run_threads'] = args.threads
    if args.deterministic:
        config['run_deterministic'] = True
    run = section_config(config, 'run', RunConfig)
    out = args.out or os.path.join(run.out, command)
    os.makedirs(out, exist_ok=True)
    threads = apply_threads(1 if run.deterministic else run.threads)

    meta = {
        'command':       command,
        'variant':       args.variant,
        'seed':          run.seed,
        'threads':       threads,
        'deterministic': run.deterministic,
        'config_hash':   config_hash(config),
        'config':        config,
        'versions':      {'posefield': posefield.__version__, 'numpy': np.__version__,
                          'scipy': scipy.__version__, 'threadpoolctl': threadpoolctl.__version__,
                          'python': platform.python_version()},
    }
    write_json(os.path.join(out, RUN_FILE), meta)
    logger.info('%s: output in %s (seed %d, config %s)', command, out, run.seed, meta['config_hash'][:12])
    return RunContext(config, run, run.seed, out)


def load_network(ctx: RunContext, path: Optional[str]) -> MpnnParams:
    cfg = section_config(ctx.config, 'mra', MraConfig)
    net = MpnnParams.from_config(cfg, np.random.default_rng(ctx.seed))
    if path is None:
        logger.warning('No rotation network checkpoint given: refinement starts from an untrained network')
    else:
        net.load_state_dict(load_checkpoint(path))
    return net


def load_field(ctx: RunContext, path: str) -> RadianceField:
    field = RadianceField(section_config(ctx.config, 'field', FieldConfig))
    field.load_state_dict(load_checkpoint(path))
    return field


def view_poses(scene: ScenePackage) -> List[RigidTransform]:
    views = scene.train_views()
    poses = [scene.frames[scene.view_frame(v)].pose for v in views]
    missing = [v for v, p in zip(views, poses) if p is None]
    if missing:
        raise ValueError(f'Scene {scene.name} has no pose for views {missing}')
    return poses


def view_references(scene: ScenePackage) -> Optional[List[RigidTransform]]:
    if scene.ground_truth is None:
        return None
    return [scene.ground_truth[scene.view_frame(v)] for v in scene.train_views()]


def pose_errors(poses: Sequence[RigidTransform], reference: Sequence[RigidTransform]) -> np.ndarray:
    """ Rotation errors in degrees after similarity (or rotation-only) alignment """
    if len(poses) >= 3:
        return align_pose_sets(poses, reference).rotation_errors
    q  = np.stack([p.rotation.as_array() for p in poses])
    gt = np.stack([p.rotation.as_array() for p in reference])
    return rotation_errors_deg(q, gt)


def error_summary(prefix: str, errors: np.ndarray) -> Dict[str, float]:
    return {f'{prefix}_mean_deg':   float(np.mean(errors)),
            f'{prefix}_median_deg': float(np.median(errors)),
            f'{prefix}_rms_deg':    float(np.sqrt(np.mean(errors ** 2)))}


def corpus_from_file(path: str) -> List[CorpusEntry]:
    corpus = []
    for record in load_graphs(path):
        if record.ground_truth is None:
            raise ValueError(f'{path}: graph {record.graph_id} has no ground truth')
        outliers = record.outliers if record.outliers is not None else np.zeros(record.graph.n_edges, dtype=bool)
        sample = SyntheticGraph(record.graph, record.ground_truth, outliers, math.nan)
        corpus.append(CorpusEntry(record.graph_id, SyntheticGraphSpec(), sample))
    if not corpus:
        raise ValueError(f'{path}: no view graphs')
    return corpus


# ------------------------------------------------------------------------------
# commands
def synth_graphs(args, ctx: RunContext) -> None:
    cfg  = section_config(ctx.config, 'mra', MraConfig)
    spec = SyntheticGraphSpec(node_count=args.nodes or cfg.node_count,
                              edge_density=args.density if args.density is not None else cfg.edge_density,
                              noise_sigma_deg=args.sigma_deg or cfg.noise_sigma_deg,
                              outlier_fraction=args.outliers if args.outliers is not None else cfg.outlier_fraction,
                              seed=ctx.seed)
    corpus = generate_corpus(args.count or cfg.graphs, ctx.seed, spec)
    save_graphs(os.path.join(ctx.out, 'graphs.jsonl'), corpus_records(corpus))
    save_corpus_manifest(os.path.join(ctx.out, 'corpus.json'), corpus, ctx.seed)
    records = [e.manifest_record() for e in corpus]
    columns = ['graph_id', 'seed', 'n', 'm', 'sigma_deg', 'outlier_fraction']
    write_metrics(ctx, {'graphs': len(corpus),
                        'mean_nodes': float(np.mean([r['n'] for r in records])),
                        'mean_edges': float(np.mean([r['m'] for r in records]))},
                  columns, [[r[c] for c in columns] for r in records])


def train_mra(args, ctx: RunContext) -> None:
    cfg = section_config(ctx.config, 'mra', MraConfig)
    if args.graphs:
        corpus = corpus_from_file(args.graphs)
    else:
        spec   = SyntheticGraphSpec(cfg.node_count, cfg.edge_density, cfg.noise_sigma_deg, cfg.outlier_fraction, ctx.seed)
        corpus = generate_corpus(args.count or cfg.graphs, ctx.seed, spec)
    result = pretrain(corpus, cfg, ctx.seed, os.path.join(ctx.out, 'mra.ckpt'), args.verbose)
    write_csv(os.path.join(ctx.out, 'history.csv'), ['epoch', 'loss'], list(enumerate(result.history)))
    write_metrics(ctx, result.evaluation.summary(), metrics_columns, result.evaluation.rows)


def eval_mra(args, ctx: RunContext) -> None:
    cfg      = section_config(ctx.config, 'mra', MraConfig)
    net      = load_network(ctx, args.checkpoint)
    corpus   = corpus_from_file(args.graphs)
    prepared = [prepare_graph(e.graph_id, e.sample, cfg.clean_threshold_deg) for e in corpus]
    result   = evaluate(net, prepared)
    write_metrics(ctx, result.summary(), metrics_columns, result.rows)


def perturb(args, ctx: RunContext) -> None:
    scene  = load_manifest(args.scene)
    poses  = view_poses(scene)
    cov      = args.cov if args.cov is not None else ctx.run.perturb_cov
    fraction = args.fraction if args.fraction is not None else ctx.run.perturb_fraction
    shift    = 0.0 if args.rotations_only else ctx.run.translation_std
    noisy  = perturb_poses(poses, cov, ctx.seed, shift, fraction)
    save_manifest(scene.with_view_poses(noisy), ctx.out)

    angles = np.array([math.degrees((a.rotation.inverse() * b.rotation).angle()) for a, b in zip(poses, noisy)])
    write_metrics(ctx, {'cov': cov, 'fraction': fraction, **error_summary('perturbation', angles)},
                  ['view', 'angle_deg'], list(zip(scene.train_views(), angles)))


def solve_poses(args, ctx: RunContext) -> None:
    scene   = load_manifest(args.scene)
    mra     = section_config(ctx.config, 'mra', MraConfig)
    net     = load_network(ctx, args.checkpoint)
    poses   = view_poses(scene)
    views   = scene.train_views()
    refined = refine_view_graph(poses, net, scene.pairs, scene.relatives,
                                mra.clean_threshold_deg, args.translations)
    save_poses(os.path.join(ctx.out, 'poses.json'), refined.poses, views)

    metrics = {'views': len(views), 'edges': refined.graph.n_edges}
    reference = view_references(scene)
    columns = rows = None
    if reference is not None:
        before = pose_errors(poses, reference)
        after  = pose_errors(refined.poses, reference)
        metrics.update(error_summary('before', before))
        metrics.update(error_summary('after', after))
        columns, rows = ['view', 'before_deg', 'after_deg'], list(zip(views, before, after))
        if args.baseline:
            robust = RobustLossConfig(kind=ctx.run.robust)
            comparison = compare_averaging(refined.graph, reference, net, robust, mra.clean_threshold_deg)
            metrics.update({f'baseline_{k}': v for k, v in comparison.summary().items()})
    elif args.baseline:
        raise ValueError('The averaging baseline needs reference poses')
    write_metrics(ctx, metrics, columns, rows)


def toy_scene(args, ctx: RunContext) -> None:
    cfg   = section_config(ctx.config, 'scene', SceneConfig, seed=ctx.seed)
    scene = build_toy_scene(cfg, with_depth=not args.no_depth)
    save_manifest(scene, ctx.out)
    write_metrics(ctx, {'frames': len(scene), 'train_views': len(scene.train_views()),
                        'test_frames': len(scene.indices('test'))})


def joint(args, ctx: RunContext, variant: str) -> None:
    scene    = load_manifest(args.scene)
    net      = load_network(ctx, args.checkpoint) if variant != 'frozen' else None
    trainer  = JointTrainer(scene, variant,
                            schedule=section_config(ctx.config, 'schedule', ScheduleConfig),
                            field_cfg=section_config(ctx.config, 'field', FieldConfig),
                            mra_cfg=section_config(ctx.config, 'mra', MraConfig),
                            depth_cfg=section_config(ctx.config, 'depth', DepthConfig),
                            net=net, seed=ctx.seed, verbose=args.verbose)
    result = trainer.run(audit=getattr(args, 'audit', False))

    save_checkpoint(os.path.join(ctx.out, 'field.ckpt'), result.radiance.state_dict())
    if variant != 'frozen':
        save_checkpoint(os.path.join(ctx.out, 'gnn.ckpt'), result.net.state_dict())
    save_poses(os.path.join(ctx.out, 'poses.json'), result.poses, trainer.views)
    write_json(os.path.join(ctx.out, 'intrinsics.json'), result.intrinsics.to_json())
    if result.history:
        columns = sorted({k for row in result.history for k in row})
        write_csv(os.path.join(ctx.out, 'history.csv'), columns,
                  [[row.get(k, '') for k in columns] for row in result.history])
    if result.depth_alignment:
        write_csv(os.path.join(ctx.out, 'depth_alignment.csv'), ['frame', 'alpha', 'beta'],
                  [(d.frame_id, a, b) for d, (a, b) in zip(trainer.depth_maps, result.depth_alignment)])

    metrics = dict(result.metrics)
    train = evaluate_result(scene, result, 'train')
    metrics.update({'train_psnr': train.psnr, 'train_ssim': train.ssim})
    rows = [('train',) + tuple(r) for r in train.rows]
    if scene.indices('test', scale=None) and scene.ground_truth is not None and len(result.poses) >= 3:
        test = evaluate_result(scene, result, 'test')
        metrics.update({'test_psnr': test.psnr, 'test_ssim': test.ssim})
        rows += [('test',) + tuple(r) for r in test.rows]
    write_metrics(ctx, metrics, ['split'] + eval_columns, rows)


def frame_poses(scene: ScenePackage, indices: Sequence[int], path: Optional[str]) -> List[RigidTransform]:
    """ Poses of `indices` from a pose file, mapped from the reference frame when missing """
    lookup = load_poses(path) if path else {}
    poses: List[Optional[RigidTransform]] = []
    for k in indices:
        f = scene.frames[k]
        poses.append(lookup.get(f.frame_id) or lookup.get(f.view) or (None if lookup else f.pose))
    missing = [i for i, p in zip(indices, poses) if p is None]
    if missing:
        views = [v for v in scene.train_views() if v in lookup]
        if scene.ground_truth is None or len(views) < 3:
            raise ValueError(f'No pose for frames {[scene.frames[k].frame_id for k in missing]}')
        anchors = [scene.ground_truth[scene.view_frame(v)] for v in views]
        mapped  = map_into_estimate([scene.ground_truth[k] for k in missing], [lookup[v] for v in views], anchors)
        fill = dict(zip(missing, mapped))
        poses = [fill.get(k, p) for k, p in zip(indices, poses)]
    return poses


def eval_field(args, ctx: RunContext) -> None:
    scene   = load_manifest(args.scene)
    field   = load_field(ctx, args.field)
    indices = scene.indices(args.split, scale=None)
    record  = run_eval(scene, field, frame_poses(scene, indices, args.poses), indices)
    write_metrics(ctx, record.summary(), eval_columns, record.rows)


def render(args, ctx: RunContext) -> None:
    scene = load_manifest(args.scene)
    field = load_field(ctx, args.field)
    ids   = [f.frame_id for f in scene.frames]
    if args.frame not in ids:
        raise ValueError(f'Unknown frame {args.frame}')
    k     = ids.index(args.frame)
    f     = scene.frames[k]
    pose  = frame_poses(scene, [k], args.poses)[0]
    enc   = encoding_at(field.cfg, field.cfg.anneal_steps)
    color, depth = render_image(field, pose, f.intrinsics, f.height, f.width, scene.near, scene.far, enc)
    if args.format == 'png':
        codecs.write_png(os.path.join(ctx.out, f'{f.frame_id}.png'), np.clip(color, 0.0, 1.0))
    else:
        codecs.write_ppm(os.path.join(ctx.out, f'{f.frame_id}.ppm'), codecs.to_uint8(color))
    codecs.write_pfm(os.path.join(ctx.out, f'{f.frame_id}_depth.pfm'), depth)


# ------------------------------------------------------------------------------
# report
def _read_rows(path: str) -> Dict[str, List[float]]:
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    columns: Dict[str, List[float]] = {}
    text_columns = set()
    for row in rows:
        for key, text in row.items():
            try:
                columns.setdefault(key, []).append(float(text))
            except (TypeError, ValueError):
                text_columns.add(key)
    return {k: v for k, v in columns.items() if v and k not in text_columns}


def emit_report(run_dir: str, out: Optional[str] = None) -> Tuple[str, str]:
    """ One row per run below `run_dir`: its summary metrics plus mean/median/rms of its per-item columns """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f'Run directory not found: {run_dir}')
    runs = sorted(root for root, _, files in os.walk(run_dir) if METRICS_FILE in files)
    if not runs:
        raise ValueError(f'No metrics under {run_dir}')

    table = []
    for root in runs:
        with open(os.path.join(root, METRICS_FILE)) as f:
            metrics = json.load(f)
        row = {'run': os.path.relpath(root, run_dir)}
        row.update({k: v for k, v in metrics.items() if isinstance(v, (int, float))})
        rows_path = os.path.join(root, ROWS_FILE)
        if os.path.exists(rows_path):
            for key, values in _read_rows(rows_path).items():
                if key.endswith('_id'):
                    continue
                v = np.asarray(values)
                row[f'{key}_mean']   = float(v.mean())
                row[f'{key}_median'] = float(np.median(v))
                row[f'{key}_rms']    = float(np.sqrt(np.mean(v ** 2)))
        table.append(row)

    columns = ['run'] + sorted({k for row in table for k in row} - {'run'})
    out = out or run_dir
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, 'report.csv')
    md_path  = os.path.join(out, 'report.md')
    write_csv(csv_path, columns, [[row.get(c, '') for c in columns] for row in table])
    with open(md_path, 'w') as f:
        f.write(f'# Report: {run_dir}\n\n')
        f.write('| metric | ' + ' | '.join(row['run'] for row in table) + ' |\n')
        f.write('|---|' + '---|' * len(table) + '\n')
        for c in columns[1:]:
            cells = [f'{row[c]:.4g}' if c in row else '' for row in table]
            f.write(f'| {c} | ' + ' | '.join(cells) + ' |\n')
    return csv_path, md_path


# ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    class custom_formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
        pass

    parser = argparse.ArgumentParser(prog='posefield', formatter_class=custom_formatter,
                                     description='''\033[1;33m{}\033[0m'''.format(logo))
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--variant', choices=run_variants, default='desk',
                        help='Run configuration')
    common.add_argument('--config',
                        help='Configuration file for custom variants')
    common.add_argument('--seed', type=int,
                        help='Seed for every random draw (overrides the configuration)')
    common.add_argument('--out',
                        help='Output directory (default: <run out>/<command>)')
    common.add_argument('--threads', type=int,
                        help='Thread cap for numerical libraries (0: all cores)')
    common.add_argument('--deterministic', action='store_true',
                        help='Force deterministic mode')
    common.add_argument('--verbose', action='store_true',
                        help='Print the configuration, debug logs and progress bars')

    # Actions
    p_action = parser.add_subparsers(dest='action', help='Available commands')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('synth-graphs', parents=[common], formatter_class=custom_formatter,
                            help='Generate a synthetic view-graph corpus')
    p.add_argument('--count', type=int, help='Number of graphs')
    p.add_argument('--outliers', type=float, help='Largest outlier fraction')
    p.add_argument('--sigma-deg', type=parse_range(float), help='Noise range lo:hi in degrees')
    p.add_argument('--nodes', type=parse_range(int), help='Node count range lo:hi')
    p.add_argument('--density', type=float, help='Edge density')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('train-mra', parents=[common], formatter_class=custom_formatter,
                            help='Pretrain the rotation-averaging network')
    p.add_argument('--graphs', help='View graphs (JSON lines); generated from the configuration when absent')
    p.add_argument('--count', type=int, help='Number of generated graphs')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('eval-mra', parents=[common], formatter_class=custom_formatter,
                            help='Evaluate the rotation-averaging network')
    p.add_argument('--graphs', required=True, help='View graphs (JSON lines)')
    p.add_argument('--checkpoint', required=True, help='Network checkpoint')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('perturb', parents=[common], formatter_class=custom_formatter,
                            help='Perturb the poses of a scene')
    p.add_argument('--scene', required=True, help='Scene manifest')
    p.add_argument('--cov', type=float, help='Per-axis variance of the axis-angle noise')
    p.add_argument('--fraction', type=float, help='Share of views to perturb')
    p.add_argument('--rotations-only', action='store_true', help='Leave translations untouched')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('solve-poses', parents=[common], formatter_class=custom_formatter,
                            help='Clean, bootstrap and refine the view graph of a scene')
    p.add_argument('--scene', required=True, help='Scene manifest')
    p.add_argument('--checkpoint', help='Network checkpoint')
    p.add_argument('--translations', choices=['keep', 'solve'], default='keep',
                   help='Keep the input translations or solve them from the refined rotations')
    p.add_argument('--baseline', action='store_true', help='Also compare against IRLS rotation averaging')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('toy-scene', parents=[common], formatter_class=custom_formatter,
                            help='Render the analytic toy scene')
    p.add_argument('--no-depth', action='store_true', help='Omit depth maps')
    # --------------------------------------------------------------------------
    for name, text in (('train-nerf', 'Train the field with frozen poses'),
                       ('joint', 'Joint pose and field training from noisy poses'),
                       ('joint-nopose', 'Joint training without input poses'),
                       ('joint-e2e', 'Joint training without poses or focal lengths')):
        p = p_action.add_parser(name, parents=[common], formatter_class=custom_formatter, help=text)
        p.add_argument('--scene', required=True, help='Scene manifest')
        if name != 'train-nerf':
            p.add_argument('--checkpoint', help='Pretrained network checkpoint')
            p.add_argument('--audit', action='store_true', help='Verify gradient routing')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('eval', parents=[common], formatter_class=custom_formatter,
                            help='Render and score a split')
    p.add_argument('--scene', required=True, help='Scene manifest')
    p.add_argument('--field', required=True, help='Field checkpoint')
    p.add_argument('--poses', help='Pose file (default: manifest poses)')
    p.add_argument('--split', choices=['train', 'test'], default='test', help='Frames to score')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('render', parents=[common], formatter_class=custom_formatter,
                            help='Render one frame')
    p.add_argument('--scene', required=True, help='Scene manifest')
    p.add_argument('--field', required=True, help='Field checkpoint')
    p.add_argument('--frame', required=True, help='Frame id')
    p.add_argument('--poses', help='Pose file (default: manifest poses)')
    p.add_argument('--format', choices=['ppm', 'png'], default='ppm', help='Image format')
    # --------------------------------------------------------------------------
    p = p_action.add_parser('report', formatter_class=custom_formatter,
                            help='Tabulate the metrics of a run directory')
    p.add_argument('--run', required=True, help='Run directory')
    p.add_argument('--out', help='Report directory (default: the run directory)')
    return parser


commands = {
    'synth-graphs': synth_graphs,
    'train-mra':    train_mra,
    'eval-mra':     eval_mra,
    'perturb':      perturb,
    'solve-poses':  solve_poses,
    'toy-scene':    toy_scene,
    'train-nerf':   lambda args, ctx: joint(args, ctx, 'frozen'),
    'joint':        lambda args, ctx: joint(args, ctx, 'rmnerf'),
    'joint-nopose': lambda args, ctx: joint(args, ctx, 'nopose'),
    'joint-e2e':    lambda args, ctx: joint(args, ctx, 'e2e'),
    'eval':         eval_field,
    'render':       render,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.action is None:
        parser.print_usage(sys.stderr)
        return 2

    logging.basicConfig(level=logging.DEBUG if getattr(args, 'verbose', False) else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        if args.action == 'report':
            csv_path, md_path = emit_report(args.run, args.out)
            print(csv_path)
            print(md_path)
        else:
            ctx = setup_run(args, args.action)
            commands[args.action](args, ctx)
    except Exception as error:
        logger.debug('Run failed', exc_info=True)
        print(f'Error: {error}', file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == '__main__':
    main()
