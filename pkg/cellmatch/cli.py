import os
import os.path as osp
import sys
import logging
from argparse import ArgumentParser

from . import __version__, io
from .atlas import (AccuracyReport, atlas_accuracy, build_supervised_atlas,
                    build_unsupervised_atlas, match_to_atlas)
from .bopt import LearnConfig, learn_parameters
from .costs import (ATLAS_SPARSITY, DEFAULT_C0, MGM_C0, CostParams,
                    CostWeights)
from .exceptions import CellmatchError, ConfigError, MissingLabels
from .gm import SolverConfig
from .mgm import solve_all_pairs, synchronize
from .geometry import realign
from .pipeline import (MODELS, MODES, SWEEP_SIZES, RunConfig, load_split,
                       pair_masks, prealign_worms, run_evaluate, run_generate,
                       run_supervised, run_unsupervised)
from .profiling import default_workers
from .synth import GeneratorConfig

ALL_ACTIONS = ("generate", "prealign", "learn", "pairwise", "synchronize",
               "build-atlas", "match", "evaluate", "pipeline-unsup",
               "pipeline-sup")
help_msg = """
Available commands:

    generate        write a synthetic dataset of labeled worms
    prealign        rotate worms into the canonical body frame
    learn           learn matching costs from unlabeled worms
    pairwise        match every pair of worms
    synchronize     make pairwise matchings cycle consistent
    build-atlas     build a statistical atlas from a universe or from labels
    match           match worms to an atlas
    evaluate        accuracy summaries and plots of a finished run
    pipeline-unsup  run the whole unsupervised pipeline
    pipeline-sup    run the supervised baseline

Type cellmatch <command> --help for usage help on a specific command.
"""

LOSS_ALIASES = {'sync': 'sync_sparse', 'cycle': 'discrete_cycle',
                'sync_sparse': 'sync_sparse', 'discrete_cycle': 'discrete_cycle'}

logger = logging.getLogger(__name__)
logging.basicConfig(format='%(levelname)s %(name)s: %(message)s')

EXIT_FAILURE = 1
EXIT_USAGE = 2


def print_usage():
    print("Usage: %s <command> <options> <arguments>"
          % osp.basename(sys.argv[0]))
    print(help_msg)


def get_action():
    """Pop first argument, check it is a valid action."""
    if len(sys.argv) <= 1:
        print_usage()
        sys.exit(EXIT_USAGE)
    if sys.argv[1] in ('-h', '--help'):
        print_usage()
        sys.exit(0)
    if sys.argv[1] == '--version':
        print(__version__)
        sys.exit(0)
    if not sys.argv[1] in ALL_ACTIONS:
        print_usage()
        sys.exit(EXIT_USAGE)

    return sys.argv.pop(1)


def env_seed(default=0):
    """$CELLMATCH_SEED when set, else ``default``."""
    value = os.environ.get('CELLMATCH_SEED')
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError('CELLMATCH_SEED must be an integer, got %r' % value)


def make_parser(usage):
    """Parser with the options shared by every command."""
    parser = ArgumentParser(usage=usage)
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('--seed', type=int, default=None,
                        help='master seed (default 0; $CELLMATCH_SEED overrides it)')
    parser.add_argument('--workers', type=int, default=None,
                        help='parallel workers (default: usable CPUs)')
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='log debug messages')
    parser.add_argument('-q', '--quiet', action='store_true',
                        help='log warnings and errors only')
    return parser


def parse(parser):
    args = parser.parse_args()
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.getLogger('cellmatch').setLevel(level)
    args.seed = env_seed(0 if args.seed is None else args.seed)
    if args.workers is None:
        args.workers = default_workers()
    return args


def parse_lambda(text):
    if text is None:
        return None
    try:
        values = tuple(float(v) for v in text.split(','))
    except ValueError:
        raise ConfigError('--lambda takes three comma separated numbers')
    CostWeights.from_sequence(values)
    return values


def parse_trials(text):
    try:
        values = tuple(int(v) for v in text.split(','))
    except ValueError:
        raise ConfigError('--trials takes three comma separated integers')
    if len(values) != 3:
        raise ConfigError('--trials takes three comma separated integers')
    return values


def learn_config(args, base=None):
    d = (base or LearnConfig()).to_dict()
    d['seed'] = args.seed
    d['workers'] = args.workers
    if getattr(args, 'trials', None):
        d['trials_per_stage'] = list(parse_trials(args.trials))
    if getattr(args, 'n_learn', None):
        d['n_learn'] = args.n_learn
    if getattr(args, 'loss', None):
        d['loss_kind'] = LOSS_ALIASES[args.loss]
    return LearnConfig.from_dict(d)


def generate_action():
    """Write a synthetic dataset."""
    parser = make_parser('cellmatch generate [options] --out DIR')
    parser.add_argument('--out', required=True, help='dataset directory')
    parser.add_argument('--n-train', '--train', dest='n_train', type=int,
                        default=20)
    parser.add_argument('--n-test', '--test', dest='n_test', type=int,
                        default=10)
    parser.add_argument('--labels', type=int, default=None,
                        help='number of labels in the ground-truth model')
    parser.add_argument('--full-scale', action='store_true',
                        help='use the full-size body and label count')
    parser.add_argument('--spurious-rate', type=float, default=None)
    parser.add_argument('--dropout', type=float, default=None)
    parser.add_argument('--config', default=None,
                        help='generator settings as a JSON file')
    args = parse(parser)

    overrides = {'seed': args.seed}
    if args.labels is not None:
        overrides['n_labels'] = args.labels
    if args.spurious_rate is not None:
        overrides['spurious_rate'] = args.spurious_rate
    if args.dropout is not None:
        overrides['dropout_prob'] = args.dropout
    if args.config:
        cfg = GeneratorConfig.from_dict(io.read_json(args.config))
        cfg = cfg.replace(**overrides)
    elif args.full_scale:
        cfg = GeneratorConfig.full_scale(**overrides)
    else:
        cfg = GeneratorConfig.desk(**overrides)
    run_generate(cfg, args.out, args.n_train, args.n_test)
    print("wrote %d train and %d test worms to %s"
          % (args.n_train, args.n_test, args.out))


def prealign_action():
    """Prealign the train/ and test/ worms of a dataset."""
    parser = make_parser('cellmatch prealign --data DIR --out DIR')
    parser.add_argument('--data', required=True)
    parser.add_argument('--out', required=True)
    args = parse(parser)

    transforms = {}
    for split in ('train', 'test'):
        if not osp.isdir(osp.join(args.data, split)):
            continue
        worms, tfs = prealign_worms(load_split(args.data, split))
        io.save_worms(osp.join(args.out, split), worms)
        transforms.update(tfs)
    if not transforms:
        raise ConfigError('no train/ or test/ worms under %s' % args.data)
    io.write_json(osp.join(args.out, 'transforms.json'),
                  {'transforms': transforms,
                   'meta': io.meta(args.seed, {'action': 'prealign'})})


def learn_action():
    """Learn covariances and sparsity parameters."""
    parser = make_parser('cellmatch learn --data DIR --out DIR [options]')
    parser.add_argument('--data', required=True,
                        help='directory of aligned worm files')
    parser.add_argument('--out', required=True)
    parser.add_argument('--trials', default=None,
                        help='trials per stage, e.g. 200,200,100')
    parser.add_argument('--n-learn', type=int, default=None)
    parser.add_argument('--loss', choices=sorted(LOSS_ALIASES), default=None)
    parser.add_argument('--config', default=None,
                        help='learning settings as a JSON file')
    args = parse(parser)

    base = LearnConfig.from_dict(io.read_json(args.config)) if args.config else None
    cfg = learn_config(args, base)
    worms = io.load_worms(args.data)
    os.makedirs(args.out, exist_ok=True)
    result = learn_parameters(worms, cfg, osp.join(args.out, 'trials.jsonl'))
    params = CostParams(result.sigmas, CostWeights(), result.sparsity)
    doc = params.to_dict()
    doc['meta'] = io.meta(args.seed, cfg.to_dict())
    io.write_json(osp.join(args.out, 'params.json'), doc)


def pairwise_action():
    """Solve all pairwise matchings."""
    parser = make_parser('cellmatch pairwise --data DIR --params FILE --out FILE')
    parser.add_argument('--data', required=True)
    parser.add_argument('--params', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--c0', type=float, default=MGM_C0)
    parser.add_argument('--restarts', type=int, default=5)
    args = parse(parser)

    worms = io.load_worms(args.data)
    params = CostParams.from_dict(io.read_json(args.params)).replace(c0=args.c0)
    solver = SolverConfig(restarts=args.restarts, seed=args.seed)
    pairs = solve_all_pairs(worms, params, solver, args.workers, args.seed)
    doc = io.multimatching_to_dict(pairs.matching, worms)
    doc['meta'] = io.meta(args.seed, params.to_dict())
    io.write_json(args.out, doc)
    print("%d matches over %d pairs, %.1f allowed assignments per pair"
          % (pairs.matching.total_matches(), len(pairs.masks),
             pairs.mean_n_lin))


def synchronize_action():
    """Synchronize stored pairwise matchings into a universe."""
    parser = make_parser('cellmatch synchronize --data DIR --pairwise FILE '
                         '--out FILE')
    parser.add_argument('--data', required=True)
    parser.add_argument('--pairwise', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--mode', choices=('dense', 'sparse'), default='dense')
    parser.add_argument('--params', default=None,
                        help='cost parameters, needed for sparse mode')
    args = parse(parser)

    worms = io.load_worms(args.data)
    mm = io.multimatching_from_dict(io.read_json(args.pairwise), worms)
    masks = None
    if args.mode == 'sparse':
        if args.params is None:
            raise ConfigError('sparse synchronization needs --params')
        params = CostParams.from_dict(io.read_json(args.params))
        masks = pair_masks(worms, params)
    sync = synchronize(mm, args.mode, masks)
    doc = io.universe_to_dict(sync.universe, worms)
    doc['retained_matches'] = sync.retained
    doc['meta'] = io.meta(args.seed, {'mode': args.mode})
    io.write_json(args.out, doc)
    print("%d cliques, %d of %d matches kept"
          % (len(sync.universe), sync.retained, mm.total_matches()))


def build_atlas_action():
    """Build an atlas from a synchronized universe or from labels."""
    parser = make_parser('cellmatch build-atlas --data DIR '
                         '(--universe FILE --params FILE | --supervised) '
                         '--out FILE')
    parser.add_argument('--data', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--universe', default=None)
    parser.add_argument('--params', default=None)
    parser.add_argument('--supervised', action='store_true')
    parser.add_argument('--min-clique-size', type=int, default=3)
    parser.add_argument('--lambda', dest='lam', default=None,
                        help='atlas cost weights, e.g. 0.5,0.3,0.8')
    args = parse(parser)

    worms = io.load_worms(args.data)
    weights = parse_lambda(args.lam)
    if weights is not None:
        weights = CostWeights.from_sequence(weights)
    if args.supervised:
        atlas = build_supervised_atlas(worms, weights)
    else:
        if args.universe is None or args.params is None:
            raise ConfigError('an unsupervised atlas needs --universe and '
                              '--params')
        universe = io.universe_from_dict(io.read_json(args.universe), worms)
        params = CostParams.from_dict(io.read_json(args.params))
        atlas = build_unsupervised_atlas(universe.filter(args.min_clique_size),
                                         worms, params.sigmas)
        if weights is not None:
            atlas = atlas.with_weights(weights)
    io.write_json(args.out, io.atlas_to_dict(atlas))
    print("atlas with %d labels" % len(atlas.entries))


def match_action():
    """Match worms to an atlas and report accuracy when labels exist."""
    parser = make_parser('cellmatch match --atlas FILE --data DIR --out FILE')
    parser.add_argument('--atlas', required=True)
    parser.add_argument('--data', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--realign', type=int, default=7,
                        help='re-alignment rounds against the atlas (0: none)')
    args = parse(parser)

    atlas = io.atlas_from_dict(io.read_json(args.atlas))
    worms = io.load_worms(args.data)
    solver = SolverConfig(seed=args.seed)
    params = CostParams(sparsity=ATLAS_SPARSITY, c0=DEFAULT_C0)
    label_map = atlas.label_map() if atlas.label_names else None
    matches, reports = {}, []
    for w in worms:
        if args.realign > 0:
            w = realign(w, atlas, params, args.realign, solver, args.seed).worm
        m = match_to_atlas(atlas, w, ATLAS_SPARSITY, DEFAULT_C0, solver)
        matches[w.worm_id] = io.matching_to_dict(m, 'atlas', w.worm_id)
        if label_map is not None and w.is_labeled:
            r = atlas_accuracy(m, w, label_map)
            reports.append(r)
            print("%-16s accuracy %.4f (%d/%d)" % (w.worm_id, r.accuracy,
                                                   r.correct, r.total))
    doc = {'matches': matches, 'meta': io.meta(args.seed, {'action': 'match'})}
    if reports:
        total = AccuracyReport.combine(reports)
        doc['accuracy'] = total.to_dict()
        print("pooled accuracy %.4f" % total.accuracy)
    io.write_json(args.out, doc)


def add_run_options(parser):
    parser.add_argument('--data', required=True, help='dataset directory')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--config', default=None,
                        help='run settings as a JSON file')
    parser.add_argument('--lambda', dest='lam', default=None,
                        help='atlas cost weights, e.g. 0.5,0.3,0.8')
    parser.add_argument('--restarts', type=int, default=None)


def run_config(args, **extra):
    d = io.read_json(args.config) if args.config else {}
    d.update(extra)
    d['data_dir'] = args.data
    d['out_dir'] = args.out
    d['seed'] = args.seed
    d['workers'] = args.workers
    if args.lam is not None:
        d['atlas_lambda'] = list(parse_lambda(args.lam))
    cfg = RunConfig.from_dict(d)
    if args.restarts is not None:
        cfg.solver = SolverConfig(args.restarts, cfg.solver.max_sweeps, args.seed)
    return cfg


def pipeline_unsup_action():
    """Unsupervised pipeline from raw worms to test accuracy."""
    parser = make_parser('cellmatch pipeline-unsup --data DIR --out DIR '
                         '[options]')
    add_run_options(parser)
    parser.add_argument('--model', choices=MODELS, default=None)
    parser.add_argument('--mode', choices=MODES, default=None)
    parser.add_argument('--loss', choices=sorted(LOSS_ALIASES), default=None)
    parser.add_argument('--trials', default=None,
                        help='trials per stage, e.g. 200,200,100')
    parser.add_argument('--n-learn', type=int, default=None)
    parser.add_argument('--params', default=None,
                        help='skip learning and use these cost parameters')
    parser.add_argument('--mgm-c0', type=float, default=None,
                        help='unassignment cost of the training-set matching '
                             '(default %g)' % MGM_C0)
    parser.add_argument('--single-realign', action='store_true')
    parser.add_argument('--resume', action='store_true',
                        help='reuse artifacts already in the output directory')
    args = parse(parser)

    extra = {}
    for key in ('model', 'mode'):
        if getattr(args, key) is not None:
            extra[key] = getattr(args, key)
    if args.params is not None:
        extra['params_path'] = args.params
    if args.mgm_c0 is not None:
        extra['mgm_c0'] = args.mgm_c0
    if args.single_realign:
        extra['single_realign'] = True
    if args.resume:
        extra['resume'] = True
    cfg = run_config(args, **extra)
    cfg.learn = learn_config(args, cfg.learn)
    report = run_unsupervised(cfg)
    _print_report(report)


def pipeline_sup_action():
    """Supervised baseline: label-aligned atlas evaluated on test worms."""
    parser = make_parser('cellmatch pipeline-sup --data DIR --out DIR '
                         '[options]')
    add_run_options(parser)
    parser.add_argument('--tune-weights', type=int, default=0, metavar='N',
                        help='tune atlas weights with N search trials')
    args = parse(parser)

    cfg = run_config(args, tune_weights=args.tune_weights)
    report = run_supervised(cfg)
    _print_report(report)


def evaluate_action():
    """Summaries, training-size sweep and plots of a finished run."""
    parser = make_parser('cellmatch evaluate --out DIR [options]')
    parser.add_argument('--out', required=True,
                        help='output directory of pipeline-unsup')
    parser.add_argument('--sizes', default=','.join(str(n) for n in SWEEP_SIZES),
                        help='training sizes of the sweep')
    parser.add_argument('--no-plot', action='store_true')
    args = parse(parser)

    try:
        sizes = tuple(int(v) for v in args.sizes.split(','))
    except ValueError:
        raise ConfigError('--sizes takes comma separated integers')
    cfg = RunConfig(out_dir=args.out, seed=args.seed, workers=args.workers,
                    solver=SolverConfig(seed=args.seed))
    evaluation = run_evaluate(cfg, sizes, plots=not args.no_plot)
    with open(osp.join(args.out, 'summary.txt')) as f:
        print(f.read().rstrip())
    return evaluation


def _print_report(report):
    acc = report.get('atlas_accuracy')
    if acc is not None:
        print("atlas accuracy %.4f +- %.4f" % (acc['mean'], acc['std']))
    pre = report.get('pre_atlas_accuracy')
    if pre is not None:
        print("pre-atlas accuracy %.4f" % pre['accuracy'])


def main():
    actions = {"generate": generate_action,
               "prealign": prealign_action,
               "learn": learn_action,
               "pairwise": pairwise_action,
               "synchronize": synchronize_action,
               "build-atlas": build_atlas_action,
               "match": match_action,
               "evaluate": evaluate_action,
               "pipeline-unsup": pipeline_unsup_action,
               "pipeline-sup": pipeline_sup_action}
    action = get_action()
    try:
        actions[action]()
    except (ConfigError, MissingLabels) as e:
        logger.error("%s: %s", action, e)
        sys.exit(EXIT_USAGE)
    except OSError as e:
        logger.error("%s: %s", action, e)
        sys.exit(EXIT_USAGE)
    except CellmatchError as e:
        logger.error("%s: %s", action, e)
        sys.exit(EXIT_FAILURE)


if __name__ == "__main__":
    main()
