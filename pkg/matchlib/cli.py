"""
matchmarket: simulate a market, fit a discretization plan, select features, train the
preference model, recommend, evaluate and chart, one subcommand each.

Results the user asked for go to stdout; progress and errors go to the log (stderr).
Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
"""
import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

from .domain import FEATURE_DOMAINS, DiscretizationPlan, FeatureSpace, initiation_frame, load_messages, load_users
from .errors import DataError
from .evaluation import ExperimentReport, evaluate_type_recovery, run_experiment
from .gain_chart import GainChart
from .infotheory import SelectionConfig, chi2_threshold, chimerge, extend_to_range, select_features
from .lda import Hyperparams, Schedule, TrainedModel, train
from .market import Capacities, CandidateFilter, build_market, extract_recommendations, save_recommendations, \
    solve_max_utility, verify_plan
from .run_config import RunConfig
from .simulator import DEFAULT_PLAN, SimConfig, load_truth, save_truth, simulate_market
from .utils import ensure_parent, file_digest, read_json, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


class Outputs(object):
    """Files written by one command, listed with their digests in <out>/manifest.json."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.files: List[str] = []

    def add(self, path: str) -> str:
        self.files.append(path)
        return path

    def write_manifest(self):
        out = self.cfg['paths.out']
        path = os.path.join(out, 'manifest.json')
        manifest = read_json(path) if os.path.exists(path) else {'commands': {}}
        manifest.setdefault('commands', {})[self.command] = {
            'config': self.cfg.to_dict(),
            'files': {os.path.relpath(f, out): file_digest(f) for f in self.files},
        }
        write_json(path, manifest)


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set('seed', args.seed)
    if args.out is not None:
        cfg.set('paths.out', args.out)
    for assignment in args.set or []:
        cfg.override(assignment)
    return cfg


def _hyperparams(cfg: RunConfig, n_tuples: int) -> Hyperparams:
    lda = cfg.lda
    return Hyperparams.defaults(lda.T, n_tuples, alpha=lda.alpha, beta=lda.beta)


def _schedule(cfg: RunConfig) -> Schedule:
    lda = cfg.lda
    return Schedule(burn_in=lda.burn_in, n_samples=lda.n_samples, thin=lda.thin, seed=cfg.require_seed())


def _load_corpus(cfg: RunConfig):
    users = load_users(cfg.path('users'))
    log = load_messages(cfg.path('messages'), users)
    return users, log


def cmd_simulate(cfg: RunConfig, outputs: Outputs):
    sim_cfg = SimConfig.from_run_config(cfg)
    plan = DiscretizationPlan.load(cfg['paths.plan'] or DEFAULT_PLAN)
    sim = simulate_market(sim_cfg, plan, replies=cfg['sim.replies'])
    sim.users.save(outputs.add(cfg.path('users')))
    sim.log.save(outputs.add(cfg.path('messages')))
    save_truth(outputs.add(cfg.path('truth')), sim, cfg.to_dict(), cfg['sim.export_candidates'])
    if cfg['paths.plan'] is None:
        plan.save(outputs.add(cfg.path('plan')), cfg.to_dict())
    print(f'users: {len(sim.users)}')
    print(f'messages: {len(sim.log)}')


def cmd_discretize(cfg: RunConfig, outputs: Outputs):
    users, log = _load_corpus(cfg)
    d = cfg.discretize
    frame = initiation_frame(users, log, income_dif_absolute=d.income_dif_absolute)
    if frame.empty:
        raise DataError('no first contacts to discretize')
    ranges = {
        'age': FEATURE_DOMAINS['age'],
        'weight': FEATURE_DOMAINS['weight'],
        'income_dif': (0, 10) if d.income_dif_absolute else (-10, 10),
        'height_dif': (-100, 100),
    }
    boundaries = {}
    for feature, (lo, hi) in ranges.items():
        raw = chimerge(frame[feature].to_numpy(dtype=float), frame['replied'].to_numpy(dtype=bool),
                       chi2_threshold(d.significance), d.max_intervals)
        boundaries[feature] = extend_to_range(raw, lo, hi)
        logger.info('%s: %d intervals', feature, len(boundaries[feature]) - 1)
    plan = DiscretizationPlan(boundaries, income_dif_absolute=d.income_dif_absolute)
    plan.save(outputs.add(cfg.path('plan')), cfg.to_dict())


def cmd_select_features(cfg: RunConfig, outputs: Outputs):
    users, log = _load_corpus(cfg)
    plan = DiscretizationPlan.load(cfg.path('plan'))
    s = cfg.select
    report = select_features(
        initiation_frame(users, log, plan),
        SelectionConfig(s.score_floor, s.conditional_entropy_threshold, s.mutual_information_ratio),
    )
    d = report.to_dict()
    d['config'] = cfg.to_dict()
    write_json(outputs.add(cfg.path('feature_report')), d)
    print('surviving features: ' + ', '.join(report.survivors))


def cmd_train(cfg: RunConfig, outputs: Outputs):
    users, log = _load_corpus(cfg)
    plan = DiscretizationPlan.load(cfg.path('plan'))
    schedule = _schedule(cfg)
    model = train(log, users, plan, _hyperparams(cfg, FeatureSpace(plan).size), schedule)
    model.save(outputs.add(cfg.path('model')), cfg.to_dict())


def cmd_recommend(cfg: RunConfig, outputs: Outputs):
    users = load_users(cfg.path('users'))
    model = TrainedModel.load(cfg.path('model'))
    m = cfg.market
    if cfg['paths.capacities']:
        caps = Capacities.load(cfg['paths.capacities'], m.send_capacity, m.recv_capacity)
    else:
        caps = Capacities(m.send_capacity, m.recv_capacity)
    plan_path = cfg.path('plan')
    plan = DiscretizationPlan.load(plan_path) if os.path.exists(plan_path) else None
    seed = cfg.require_seed() if m.mode == 'sampled' else cfg['seed']

    instance = build_market(model, users, caps, CandidateFilter(m.utility_floor, m.top_k), plan)
    matching = solve_max_utility(instance)
    verify_plan(matching, instance).raise_for_violations()
    matching.save(outputs.add(cfg.path('matching_plan')), cfg.to_dict())
    save_recommendations(outputs.add(cfg.path('recommendations')),
                         extract_recommendations(matching, m.mode, seed))
    print(f'objective: {matching.objective!r}')


def cmd_evaluate(cfg: RunConfig, outputs: Outputs):
    users, log = _load_corpus(cfg)
    plan = DiscretizationPlan.load(cfg.path('plan'))
    e = cfg.evaluate
    report = run_experiment(users, log, plan, _hyperparams(cfg, FeatureSpace(plan).size), _schedule(cfg),
                            e.folds, e.policies)
    truth_path, model_path = cfg.path('truth'), cfg.path('model')
    if os.path.exists(truth_path) and os.path.exists(model_path):
        prefs, labels = load_truth(truth_path)
        report.type_recovery = evaluate_type_recovery(TrainedModel.load(model_path), prefs, labels)
    else:
        logger.info('no truth or model file; type recovery skipped')
    report.config = cfg.to_dict()
    report.save(outputs.add(cfg.path('report')))
    _write_csv(report, outputs)
    for gender, summary in sorted(report.summary().items()):
        gain = summary.get('gain_two_sided_vs_suitor', {}).get('median')
        if gain is not None:
            print(f'{gender}: median gain of two_sided over suitor {gain:.2f}%')


def _write_csv(report: ExperimentReport, outputs: Outputs) -> str:
    path = os.path.splitext(outputs.cfg.path('report'))[0] + '.csv'
    ensure_parent(path)
    report.to_frame().to_csv(outputs.add(path), index=False, float_format='%.10g')
    return path


def cmd_report(cfg: RunConfig, outputs: Outputs):
    report = ExperimentReport.from_dict(read_json(cfg.path('report')))
    print(_write_csv(report, outputs))
    try:
        chart = GainChart(report)
    except DataError as e:
        logger.warning('chart skipped: %s', e)
        return
    fname = outputs.add(os.path.join(cfg['paths.out'], 'gain_chart.vl.json'))
    chart.export(fname)
    print(fname)


COMMANDS: Dict[str, Callable[[RunConfig, Outputs], None]] = {
    'simulate': cmd_simulate,
    'discretize': cmd_discretize,
    'select-features': cmd_select_features,
    'train': cmd_train,
    'recommend': cmd_recommend,
    'evaluate': cmd_evaluate,
    'report': cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='JSON or YAML file of dotted config keys')
    common.add_argument('--seed', type=int, default=None, help='root seed of every random stream')
    common.add_argument('--out', default=None, help='output directory (paths.out)')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='override one config key, e.g. --set lda.T=8 (repeatable)')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    parser = argparse.ArgumentParser(prog='matchmarket', description=__doc__.strip().splitlines()[0])
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, fn in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=fn.__name__[len('cmd_'):].replace('_', ' '))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        cfg = load_config(args)
        outputs = Outputs(cfg, args.command)
        COMMANDS[args.command](cfg, outputs)
        outputs.write_manifest()
    except DataError as e:
        logger.error('%s', e)
        return EXIT_INVALID
    except Exception as e:
        logger.error('%s failed: %s', args.command, e, exc_info=logger.isEnabledFor(logging.DEBUG))
        return EXIT_RUNTIME
    return EXIT_OK
