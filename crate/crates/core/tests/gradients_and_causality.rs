use dipole_core::ehr_data::{encode_patient, EncodedPatient, PatientRecord, Visit, Vocabulary};
use dipole_core::nn_core::{grad_check, GradCheckConfig, ParamKind, Tape};
use dipole_core::{CausalityMode, Model, ModelConfig, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    Vocabulary::from_pairs([("a", "x"), ("b", "x"), ("c", "y"), ("d", "y"), ("e", "z")]).unwrap()
}

fn random_visit(rng: &mut impl Rng) -> Visit {
    let mut codes: Vec<usize> = (0..5).filter(|_| rng.gen_bool(0.4)).collect();
    if codes.is_empty() {
        codes.push(rng.gen_range(0..5));
    }
    Visit::new(codes).unwrap()
}

fn random_record(rng: &mut impl Rng, id: &str, n: usize) -> PatientRecord {
    PatientRecord::new(id, (0..n).map(|_| random_visit(rng)).collect()).unwrap()
}

fn tiny_model(variant: Variant, rng: &mut ChaCha8Rng) -> Model {
    let mut cfg = ModelConfig::new(variant, 5, 3).with_dims(3, 3, 2);
    cfg.attentional_dim = 6;
    cfg.dropout = 0.0;
    let mut model = Model::init(cfg, rng).unwrap();
    let biases: Vec<_> = model.store().ids().filter(|&id| model.store().kind(id) == ParamKind::Bias).collect();
    for id in biases {
        let t = model.store().get(id);
        let values = (0..t.len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let shape = t.shape().to_vec();
        model.store_mut().set(id, Tensor::new(shape, values).unwrap()).unwrap();
    }
    model
}

#[test]
fn every_variant_passes_the_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let patients: Vec<EncodedPatient> = (0..2)
        .map(|i| encode_patient(&random_record(&mut rng, &format!("p{i}"), 4), &vocab()).unwrap())
        .collect();
    for variant in Variant::ALL {
        let model = tiny_model(variant, &mut rng);
        for mode in [CausalityMode::Prefix, CausalityMode::Full] {
            let report = grad_check(
                model.store(),
                |tape: &mut Tape| model.batch_loss(tape, &patients, mode),
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "{variant} {mode}: {report}");
        }
    }
}

#[test]
fn weight_penalty_enters_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patients = vec![encode_patient(&random_record(&mut rng, "p", 5), &vocab()).unwrap()];
    let mut cfg = ModelConfig::new(Variant::DipoleG, 5, 3).with_dims(3, 3, 2);
    cfg.l2 = 0.3;
    let model = Model::init(cfg, &mut rng).unwrap();
    let report = grad_check(
        model.store(),
        |tape: &mut Tape| model.batch_loss(tape, &patients, CausalityMode::Prefix),
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn prefix_predictions_ignore_future_visits() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vocab = vocab();
    for case in 0..100 {
        let variant = Variant::ALL[case % Variant::ALL.len()];
        let model = tiny_model(variant, &mut rng);
        let n = rng.gen_range(3..9);
        let rec = random_record(&mut rng, "p", n);
        // Visits after the (1-based) t + 1-th change; steps 1..=t + 1 never read them.
        let t = rng.gen_range(0..n - 2);
        let mut perturbed = rec.clone();
        for j in t + 2..n {
            perturbed.visits[j] = random_visit(&mut rng);
        }
        let a = model.predict(&encode_patient(&rec, &vocab).unwrap(), CausalityMode::Prefix).unwrap();
        let b = model
            .predict(&encode_patient(&perturbed, &vocab).unwrap(), CausalityMode::Prefix)
            .unwrap();
        for s in 0..=t {
            assert_eq!(a[s].scores, b[s].scores, "{variant} step {}", s + 1);
            assert_eq!(a[s].attention, b[s].attention);
        }
    }
}

#[test]
fn full_mode_reads_ahead_in_bidirectional_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = vocab();
    let model = tiny_model(Variant::DipolePlain, &mut rng);
    let rec = PatientRecord::new(
        "p",
        vec![Visit::new(vec![0]).unwrap(), Visit::new(vec![1]).unwrap(), Visit::new(vec![2]).unwrap()],
    )
    .unwrap();
    let mut other = rec.clone();
    other.visits[2] = Visit::new(vec![4]).unwrap();
    let run = |r: &PatientRecord| model.predict(&encode_patient(r, &vocab).unwrap(), CausalityMode::Full).unwrap();
    assert_ne!(run(&rec)[0].scores, run(&other)[0].scores);
}
