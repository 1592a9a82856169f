use rtanomaly::ingest::{generate_synthetic, minmax_normalize, make_windows, SynthConfig, FaultKind};
use rtanomaly::model::{ModelDims, RtModel};
use rtanomaly::relgraph::attention_scores;
use rtanomaly::localize::{correlation_change, mean_attention, windows_in_segment};

fn main() {
    let n = 6000;
    let w = 100;
    let cfg = SynthConfig::demo(8, n, 7);
    let data = generate_synthetic(&cfg).unwrap();
    let (train_raw, test_raw) = data.split_at(n / 2);
    let (train, stats) = minmax_normalize(&train_raw, None).unwrap();
    let (test, _) = minmax_normalize(&test_raw, Some(&stats)).unwrap();

    // untrained model: how does attention respond to content?
    let dims = ModelDims::for_data(8, w);
    let model = RtModel::new(dims, 1).unwrap();

    let train_windows = make_windows(&train, w, 10).unwrap();
    let a_n = mean_attention(&model, &train_windows).unwrap();
    println!("mean train attention row 0: {:?}", a_n.row(0).iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());

    // attention variability across normal windows
    let mut max_dev = 0.0f64;
    for i in (0..train_windows.len()).step_by(17) {
        let a = attention_scores(&model.attention, &train_windows.window(i).view()).unwrap();
        let dev = (&a - &a_n).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        max_dev = max_dev.max(dev);
    }
    println!("max |a - mean| over normal train windows: {max_dev:.4}");

    // per-fault-kind delta rows on the test half
    let test_windows = make_windows(&test, w, 1).unwrap();
    for fault in cfg.faults.iter().filter(|f| f.start >= n/2).take(6) {
        let seg = (fault.start - n/2, fault.end - n/2);
        let sw = windows_in_segment(&test_windows, seg);
        if sw.is_empty() { continue; }
        let a_a = mean_attention(&model, &sw).unwrap();
        let delta = correlation_change(&a_n.view(), &a_a.view()).unwrap();
        let target = fault.targets[0];
        let rank_of_target = {
            let mut idx: Vec<usize> = (0..8).collect();
            idx.sort_by(|&a, &b| delta[b].partial_cmp(&delta[a]).unwrap());
            idx.iter().position(|&i| i == target).unwrap()
        };
        println!("{:?} target {} delta {:?} -> target rank {}",
            fault.kind, target,
            delta.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(),
            rank_of_target);
        if fault.kind == FaultKind::CorrelationBreak {
            // full delta matrix row of the target
            let diff = (&a_a - &a_n).mapv(f64::abs);
            println!("  |dA| target row: {:?}", diff.row(target).iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
        }
    }
}
