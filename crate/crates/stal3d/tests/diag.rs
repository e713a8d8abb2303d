// Temporary calibration harness (removed before release).

use stal3d::pipeline::{evaluate, pretrain, RunConfig};
use stal3d::simworld::{make_domain_pair, DomainSpec};

struct Case {
    name: &'static str,
    channels: usize,
    objects: [usize; 2],
    density: f64,
    epochs: usize,
}

#[test]
#[ignore]
fn generalization_scan() {
    let cases = vec![
        Case { name: "ch16_o25_d12_e80", channels: 16, objects: [2, 5], density: 12000.0, epochs: 80 },
        Case { name: "ch16_o48_d12_e80", channels: 16, objects: [4, 8], density: 12000.0, epochs: 80 },
        Case { name: "ch16_o48_d18_e80", channels: 16, objects: [4, 8], density: 18000.0, epochs: 80 },
        Case { name: "ch16_o48_d18_e40", channels: 16, objects: [4, 8], density: 18000.0, epochs: 40 },
        Case { name: "ch24_o48_d18_e80", channels: 24, objects: [4, 8], density: 18000.0, epochs: 80 },
        Case { name: "ch8_o48_d18_e80", channels: 8, objects: [4, 8], density: 18000.0, epochs: 80 },
    ];
    std::env::set_var("STAL3D_THREADS", "1");
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .iter()
            .map(|case| {
                scope.spawn(move || {
                    let mut spec = DomainSpec::default();
                    spec.objects_per_scene = case.objects;
                    spec.density_base = case.density;
                    let mut cfg = RunConfig::default();
                    cfg.detector.channels = case.channels;
                    cfg.pretrain_epochs = case.epochs;
                    cfg.seed = 1;
                    let (source, control) = make_domain_pair(&spec, &spec, 500, 300, 1);
                    let t0 = std::time::Instant::now();
                    let (params, _) = pretrain(&source, &cfg, None).unwrap();
                    let train_eval = evaluate(&params, &source, &cfg).unwrap();
                    let ctrl_eval = evaluate(&params, &control, &cfg).unwrap();
                    format!(
                        "{}: train mAP_3D {:.2} | control mAP_3D {:.2} ({}) [{:.0}s]",
                        case.name,
                        train_eval.mean_ap_3d,
                        ctrl_eval.mean_ap_3d,
                        ctrl_eval
                            .per_class
                            .iter()
                            .map(|c| format!("{} {:.1}", c.name, c.ap_3d.unwrap_or(f64::NAN)))
                            .collect::<Vec<_>>()
                            .join(", "),
                        t0.elapsed().as_secs_f64()
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    for r in results {
        println!("{r}");
    }
    std::env::remove_var("STAL3D_THREADS");
}
