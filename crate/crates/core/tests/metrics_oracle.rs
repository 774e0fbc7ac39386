use camrefine::metrics::{mean_iou, ConfusionMatrix};
use camrefine::{LabelMap, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FG: usize = 20;

fn random_map(rng: &mut ChaCha8Rng, ignore: f64) -> LabelMap {
    let data = (0..16 * 16)
        .map(|_| if rng.gen_bool(ignore) { IGNORE } else { rng.gen_range(0..=FG as u8) })
        .collect();
    LabelMap::new(16, 16, data).unwrap()
}

#[test]
fn confusion_and_miou_match_a_brute_force_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (pred, gt) = (random_map(&mut rng, 0.0), random_map(&mut rng, 0.1));
        let mut cm = ConfusionMatrix::new(FG);
        cm.accumulate(&pred, &gt).unwrap();

        let mut tally = vec![vec![0u64; FG + 1]; FG + 1];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE {
                tally[g as usize][p as usize] += 1;
            }
        }
        for g in 0..=FG {
            for p in 0..=FG {
                assert_eq!(cm.get(g, p), tally[g][p]);
            }
        }

        let mut sum = 0.0;
        let mut present = 0;
        for k in 0..=FG {
            let tp = tally[k][k];
            let row: u64 = tally[k].iter().sum();
            let col: u64 = tally.iter().map(|r| r[k]).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        let expected = sum / present as f64;
        assert!((mean_iou(&cm).unwrap() - expected).abs() < 1e-12);
    }
}
