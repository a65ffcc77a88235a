import os
import json
import yaml
import hashlib
import dataclasses
from typing import Dict, Optional, Type, TypeVar

logo = r'''--------------------------------------------------
                        __ _     _     _
     _ __   ___  ___  / _(_) ___| | __| |
    | '_ \ / _ \/ __|| |_| |/ _ \ |/ _` |
    | |_) | (_) \__ \|  _| |  __/ | (_| |
    | .__/ \___/|___/|_| |_|\___|_|\__,_|
    |_|
    Rotation averaging + multi-scale radiance fields
--------------------------------------------------'''

header = '''\033[1;33m{logo}\033[0m

\033[0;32mConfiguration\033[0;0m
Variant name: {variant}
Config file: {configfile}

\033[0;32mRun parameters\033[0;0m'''

current_path   = os.path.dirname(os.path.abspath(__file__))
run_variants   = ['smoke', 'desk', 'full', 'custom']
config_files   = {variant: f'{current_path}/{variant}.yml' for variant in run_variants}
config_section = ('run', 'scene', 'schedule', 'field', 'mra', 'depth')
seed_variable  = 'POSEFIELD_SEED'

T = TypeVar('T')


def load_config(variant: str, configfile: Optional[str], verbose: bool) -> Dict:
    if variant == 'custom':
        if configfile is None:
            raise RuntimeError('A configuration file is needed for custom variant')
    elif variant not in config_files:
        raise ValueError(f'Unknown variant {variant}. Valid values: {run_variants}')
    else:
        configfile = config_files[variant]

    with open(configfile) as f:
        run_config = yaml.safe_load(f.read())
    config = {}

    for key, item in run_config.items():
        if key not in config_section:
            raise ValueError(f'Unknown configuration section "{key}" in {configfile}')
        if isinstance(item, dict):
            for k2, i2 in item.items():
                config['{}_{}'.format(key, k2)] = i2
        else:
            config[key] = item

    # the environment always wins over the file
    if os.environ.get(seed_variable):
        config['run_seed'] = int(os.environ[seed_variable])

    if verbose:
        print(header.format(logo=logo, variant=variant, configfile=configfile))
        for key, item in run_config.items():
            if isinstance(item, dict):
                print(f'{key}:')
                for k2, i2 in item.items():
                    print(f'- {k2}: {i2}')
            else:
                print(f'{key}: {item}')
        print('--------------------------------------------------')

    return config


def section_config(config: Dict, prefix: str, cls: Type[T], **overrides) -> T:
    """ Build a section dataclass from the flat `prefix_key` entries """
    names  = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, item in config.items():
        if not key.startswith(prefix + '_'):
            continue
        name = key[len(prefix) + 1:]
        if name not in names:
            raise ValueError(f'Unknown parameter "{name}" in section "{prefix}"')
        kwargs[name] = tuple(item) if isinstance(item, list) else item
    kwargs.update(overrides)
    return cls(**kwargs)


def config_hash(config: Dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(',', ':')).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed:             int   = 0
    threads:          int   = 0       # 0: every available core
    deterministic:    bool  = True
    out:              str   = 'runs'
    perturb_cov:      float = 0.1     # per-axis variance of the axis-angle noise
    perturb_fraction: float = 1.0
    translation_std:  float = 0.0
    robust:           str   = 'huber'

    def __post_init__(self) -> None:
        if self.threads < 0:
            raise ValueError(f'Thread count must be non-negative, got {self.threads}')
        if self.perturb_cov < 0:
            raise ValueError(f'Perturbation covariance must be non-negative, got {self.perturb_cov}')
