import os
import sys
import argparse
from dotenv import load_dotenv

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mleann.bench import ExperimentSpec, run_conventional
from mleann.data import load_dataset
from mleann.evolve import EvolutionConfig, run_mleann
from mleann.trainers import ALGORITHMS
from mleann.utils import DataError, format_float, resolve_workers

LM_MACKEY_BAND = 0.005
# seed 0 keeps the generation-0 best for all ten generations
MLEANN_SEED = 1
SCG_GAS_FURNACE_BAND = 0.06


def check_lm_mackey(workers: int) -> bool:
    print('LM, 24 T, Mackey-Glass, 2500 epochs, 3 seeds')
    spec = ExperimentSpec(load_dataset('mackey-glass'), architectures=('24T',), algorithms=('LM',),
                          epochs=2500, replicates=3)
    reported, raw = run_conventional(spec, workers)
    for row in raw:
        print(f"  seed {row.seed}: test rmse {format_float(row.test_rmse)}")
    worst = reported[0].test_rmse
    print(f"  worst {format_float(worst)} (band <= {LM_MACKEY_BAND})")
    return worst <= LM_MACKEY_BAND


def check_scg_gas_furnace(workers: int) -> bool:
    print('SCG, 16 T, gas furnace, 2500 epochs')
    try:
        ds = load_dataset('gas-furnace')
    except DataError as e:
        print(f"  ⚠️  skipped: {e}")
        return True
    spec = ExperimentSpec(ds, architectures=('16T',), algorithms=('SCG',), epochs=2500, replicates=3)
    reported, _ = run_conventional(spec, workers)
    worst = reported[0].test_rmse
    print(f"  worst {format_float(worst)} (band <= {SCG_GAS_FURNACE_BAND})")
    return worst <= SCG_GAS_FURNACE_BAND


def check_flop_ordering(workers: int, epochs: int = 20) -> bool:
    print(f"Flop ordering BP < SCG < QNA < LM at 14 and 24 T*, {epochs} epochs")
    ok = True
    for dataset_id in ('mackey-glass', 'gas-furnace', 'wastewater'):
        try:
            ds = load_dataset(dataset_id)
        except DataError as e:
            print(f"  ⚠️  {dataset_id} skipped: {e}")
            continue
        spec = ExperimentSpec(ds, architectures=('14T*', '24T*'), epochs=epochs, replicates=1)
        reported, _ = run_conventional(spec, workers)
        flops = {(r.architecture, r.algorithm): r.flops for r in reported}
        for arch in ('14 T*', '24 T*'):
            counts = [flops[(arch, tag)] for tag in ALGORITHMS]
            ordered = all(a < b for a, b in zip(counts, counts[1:]))
            print(f"  {dataset_id} {arch}: {counts} {'✅' if ordered else '❌'}")
            ok = ok and ordered
        for tag in ALGORITHMS:
            grows = flops[('14 T*', tag)] < flops[('24 T*', tag)]
            ok = ok and grows
            if not grows:
                print(f"  ❌ {dataset_id} {tag}: flops do not grow with hidden count")
    return ok


def check_mleann_improvement(workers: int) -> bool:
    print(f'MLEANN LM stream, Mackey-Glass, population 10, 10 generations, 100 epochs, seed {MLEANN_SEED}')
    cfg = EvolutionConfig(population=10, generations=10, epochs_per_eval=100, seed=MLEANN_SEED)
    stream = run_mleann(cfg, load_dataset('mackey-glass'), ('LM',), workers)['LM']
    bests = [s.best for s in stream.trace]
    for stats in stream.trace:
        print(f"  generation {stats.generation}: best {format_float(stats.best)} ({stats.best_arch})")
    monotone = all(b <= a for a, b in zip(bests, bests[1:]))
    improved = bests[-1] < bests[0]
    print(f"  monotone {'✅' if monotone else '❌'}  improved {'✅' if improved else '❌'}")
    return monotone and improved


CHECKS = {
    'lm-mackey': check_lm_mackey,
    'scg-gas-furnace': check_scg_gas_furnace,
    'flops': check_flop_ordering,
    'mleann': check_mleann_improvement,
}


def main():
    load_dotenv()
    parser = argparse.ArgumentParser(description='Desk-scale acceptance bands (minutes of runtime)')
    parser.add_argument('--only', choices=sorted(CHECKS), action='append', help='run only the named check(s)')
    parser.add_argument('--serial', action='store_true')
    args = parser.parse_args()

    workers = resolve_workers(args.serial)
    failed = []
    for name in args.only or list(CHECKS):
        print(f"\n{'='*60}")
        passed = CHECKS[name](workers)
        print(f"{'✅' if passed else '❌'} {name}")
        if not passed:
            failed.append(name)

    if failed:
        print(f"\n❌ Failed: {', '.join(failed)}")
        sys.exit(1)
    print('\n✅ All desk checks passed')


if __name__ == "__main__":
    main()
