"""Command-line tests: exit codes, run records and the smoke pipeline."""

import csv
import json
import os

import pytest
from threadpoolctl import threadpool_info

from cli import apply_threads, dispatch, thread_variables
from posefield.config.config import seed_variable
from posefield.io.graphs import load_graphs, load_poses
from posefield.io.manifest import load_manifest


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(seed_variable, raising=False)


def run(tmp_path, *argv):
    """Run one smoke command into tmp_path/<command>; return (exit code, output directory)."""
    out = os.path.join(tmp_path, argv[0])
    code = dispatch(list(argv) + ['--variant', 'smoke', '--out', out])
    return code, out


def read_json(path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture
def scene_dir(tmp_path):
    code, out = run(tmp_path, 'toy-scene')
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

class TestDispatch:

    def test_no_command(self):
        assert dispatch([]) == 2

    def test_usage_error(self):
        assert dispatch(['toy-scene', '--variant', 'huge']) == 2

    def test_help(self):
        assert dispatch(['--help']) == 0

    def test_runtime_error(self, tmp_path, capsys):
        code, _ = run(tmp_path, 'perturb', '--scene', os.path.join(tmp_path, 'missing.json'))
        assert code == 1
        assert 'Error:' in capsys.readouterr().err

    def test_custom_needs_config(self, tmp_path):
        assert dispatch(['toy-scene', '--variant', 'custom', '--out', str(tmp_path)]) == 1


class TestRunRecord:

    def test_run_file(self, scene_dir):
        meta = read_json(os.path.join(scene_dir, 'run.json'))
        assert meta['command'] == 'toy-scene'
        assert meta['variant'] == 'smoke'
        assert meta['seed'] == 0
        assert meta['threads'] == 1
        assert meta['deterministic'] is True
        assert len(meta['config_hash']) == 64
        assert meta['config']['scene_views'] == 4
        assert set(meta['versions']) == {'posefield', 'numpy', 'scipy', 'threadpoolctl', 'python'}

    def test_thread_cap_overrides_environment(self, monkeypatch):
        for name in thread_variables:
            monkeypatch.setenv(name, '7')
        assert apply_threads(1) == 1
        assert all(os.environ[name] == '1' for name in thread_variables)
        assert all(pool['num_threads'] == 1 for pool in threadpool_info())

    def test_deterministic_flag_pins_one_thread(self, tmp_path):
        out = os.path.join(tmp_path, 'graphs')
        code = dispatch(['synth-graphs', '--count', '2', '--variant', 'desk', '--threads', '4',
                         '--deterministic', '--out', out])
        assert code == 0
        assert read_json(os.path.join(out, 'run.json'))['threads'] == 1

    def test_seed_argument_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv(seed_variable, '5')
        code, out = run(tmp_path, 'synth-graphs', '--count', '2', '--seed', '11')
        assert code == 0
        assert read_json(os.path.join(out, 'run.json'))['seed'] == 11

    def test_environment_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv(seed_variable, '5')
        code, out = run(tmp_path, 'synth-graphs', '--count', '2')
        assert code == 0
        assert read_json(os.path.join(out, 'run.json'))['seed'] == 5

    def test_same_seed_same_bytes(self, tmp_path):
        _, a = run(os.path.join(tmp_path, 'a'), 'synth-graphs', '--count', '3')
        _, b = run(os.path.join(tmp_path, 'b'), 'synth-graphs', '--count', '3')
        for name in ('graphs.jsonl', 'corpus.json', 'metrics.json', 'rows.csv'):
            with open(os.path.join(a, name), 'rb') as fa, open(os.path.join(b, name), 'rb') as fb:
                assert fa.read() == fb.read()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

class TestCommands:

    def test_synth_graphs(self, tmp_path):
        code, out = run(tmp_path, 'synth-graphs', '--count', '4', '--nodes', '5:7', '--sigma-deg', '1:2')
        assert code == 0
        records = load_graphs(os.path.join(out, 'graphs.jsonl'))
        assert len(records) == 4
        assert all(5 <= r.graph.n_nodes <= 7 for r in records)
        assert read_json(os.path.join(out, 'metrics.json'))['graphs'] == 4

    def test_bad_range(self, tmp_path):
        code, _ = run(tmp_path, 'synth-graphs', '--nodes', '9:3')
        assert code == 2

    def test_toy_scene(self, scene_dir):
        scene = load_manifest(scene_dir)
        assert len(scene) == 5
        assert scene.has_depth
        assert read_json(os.path.join(scene_dir, 'metrics.json')) == {'frames': 5, 'train_views': 4,
                                                                      'test_frames': 1}

    def test_perturb(self, tmp_path, scene_dir):
        code, out = run(tmp_path, 'perturb', '--scene', scene_dir)
        assert code == 0
        metrics = read_json(os.path.join(out, 'metrics.json'))
        assert metrics['perturbation_mean_deg'] > 0
        noisy, clean = load_manifest(out), load_manifest(scene_dir)
        for a, b in zip(noisy.frames, clean.frames):
            if a.split == 'train':
                assert a.pose.center == pytest.approx(b.pose.center)

    def test_solve_poses_with_baseline(self, tmp_path, scene_dir):
        code, _ = run(tmp_path, 'perturb', '--scene', scene_dir)
        assert code == 0
        code, out = run(tmp_path, 'solve-poses', '--scene', os.path.join(tmp_path, 'perturb'), '--baseline')
        assert code == 0
        metrics = read_json(os.path.join(out, 'metrics.json'))
        assert {'before_mean_deg', 'after_mean_deg', 'baseline_irls_rotation_deg'} <= set(metrics)
        assert len(load_poses(os.path.join(out, 'poses.json'))) == 4

    def test_train_mra_then_eval(self, tmp_path):
        code, graphs = run(tmp_path, 'synth-graphs', '--count', '4')
        assert code == 0
        code, trained = run(tmp_path, 'train-mra')
        assert code == 0
        assert os.path.exists(os.path.join(trained, 'mra.ckpt'))
        code, out = run(tmp_path, 'eval-mra', '--graphs', os.path.join(graphs, 'graphs.jsonl'),
                        '--checkpoint', os.path.join(trained, 'mra.ckpt'))
        assert code == 0
        assert 'mean_deg' in read_json(os.path.join(out, 'metrics.json'))

    def test_train_nerf_eval_render(self, tmp_path, scene_dir):
        code, trained = run(tmp_path, 'train-nerf', '--scene', scene_dir)
        assert code == 0
        metrics = read_json(os.path.join(trained, 'metrics.json'))
        assert {'train_psnr', 'test_psnr'} <= set(metrics)
        field = os.path.join(trained, 'field.ckpt')

        code, scored = run(tmp_path, 'eval', '--scene', scene_dir, '--field', field)
        assert code == 0
        assert 'psnr' in read_json(os.path.join(scored, 'metrics.json'))

        code, rendered = run(tmp_path, 'render', '--scene', scene_dir, '--field', field, '--frame', 'test_000')
        assert code == 0
        assert {'test_000.ppm', 'test_000_depth.pfm'} <= set(os.listdir(rendered))

    def test_render_unknown_frame(self, tmp_path, scene_dir):
        code, trained = run(tmp_path, 'train-nerf', '--scene', scene_dir)
        assert code == 0
        code, _ = run(tmp_path, 'render', '--scene', scene_dir, '--field', os.path.join(trained, 'field.ckpt'),
                      '--frame', 'nope')
        assert code == 1

    def test_joint_with_audit(self, tmp_path, scene_dir):
        code, out = run(tmp_path, 'joint', '--scene', scene_dir, '--audit')
        assert code == 0
        assert {'field.ckpt', 'gnn.ckpt', 'poses.json', 'intrinsics.json', 'history.csv'} <= set(os.listdir(out))

    @pytest.mark.slow
    def test_joint_without_poses(self, tmp_path, scene_dir):
        code, out = run(tmp_path, 'joint-nopose', '--scene', scene_dir, '--audit')
        assert code == 0
        assert os.path.exists(os.path.join(out, 'depth_alignment.csv'))


class TestReport:

    def test_report(self, tmp_path, capsys):
        runs = os.path.join(tmp_path, 'runs')
        assert run(runs, 'synth-graphs', '--count', '3')[0] == 0
        assert run(runs, 'toy-scene')[0] == 0
        capsys.readouterr()

        assert dispatch(['report', '--run', runs]) == 0
        printed = capsys.readouterr().out.split()
        assert printed == [os.path.join(runs, 'report.csv'), os.path.join(runs, 'report.md')]
        with open(printed[0], newline='') as f:
            rows = list(csv.DictReader(f))
        assert [r['run'] for r in rows] == ['synth-graphs', 'toy-scene']
        assert 'n_mean' in rows[0] and 'graph_id_mean' not in rows[0]
        assert not os.path.exists(os.path.join(runs, 'run.json'))

    def test_missing_directory(self, tmp_path):
        assert dispatch(['report', '--run', os.path.join(tmp_path, 'nope')]) == 1

    def test_no_metrics(self, tmp_path):
        assert dispatch(['report', '--run', str(tmp_path)]) == 1
