use eaglenet_reference::{grad_check_path, grad_check_path_at, LossPath};
use eaglenet::config::{EnergyKind, LossKind, Pooling};

fn assert_passes(path: LossPath) {
    let r = grad_check_path(path);
    println!("{}: {r}", path.name());
    assert!(r.passed, "{}: {r}", path.name());
}

#[test]
fn ce_main_term() {
    assert_passes(LossPath::Main(LossKind::Ce));
}

#[test]
fn ce_with_support_term() {
    assert_passes(LossPath::Support(LossKind::Ce));
}

#[test]
fn energy_term_for_each_energy() {
    for e in [EnergyKind::Cossim, EnergyKind::Bilinear, EnergyKind::Mlp] {
        assert_passes(LossPath::Eam(e, Pooling::Avg));
    }
}

#[test]
fn energy_term_for_each_pooling() {
    for p in [Pooling::Max, Pooling::Min, Pooling::Global] {
        assert_passes(LossPath::Eam(EnergyKind::Mlp, p));
    }
}

#[test]
fn ce_total_loss() {
    assert_passes(LossPath::Total(LossKind::Ce));
}

// With τ≈118 the sigmoid paths amplify rounding in f by two orders of
// magnitude, and the support term lifts f to about 170, so h=1e-5 sits
// below the rounding floor for the weakest entries. These checks use a
// step where truncation and rounding are both small.
#[test]
fn sigmoid_paths_at_wider_step() {
    for (path, h) in [
        (LossPath::Main(LossKind::Sigmoid), 1e-4),
        (LossPath::Support(LossKind::Sigmoid), 1e-3),
        (LossPath::Total(LossKind::Sigmoid), 1e-3),
    ] {
        let r = grad_check_path_at(path, h);
        println!("{} (h={h:e}): {r}", path.name());
        assert!(r.passed, "{}: {r}", path.name());
    }
}
