//! Scratch sizing harness (temporary).

use std::time::Instant;

use faultgram::pipeline::{
    cmd_augment, cmd_encode, cmd_evaluate, cmd_synth, cmd_train_classifier, cmd_train_gan,
    parse_config,
};

// Desk signal: shaft 80 Hz on UER204 geometry -> BPFO 246.6 Hz, BPFI 393.4 Hz,
// FTF 30.8 Hz. fs 2048, window 64 = 31.25 ms, resonance 450 Hz, decay 400.
fn desk_dataset_full(
    root: &str,
    run: &str,
    dataset_extra: &str,
    resonance: u32,
    snr: f64,
) -> String {
    format!(
        r#"
[dataset]
root = "{root}"
window_len = 64
stride = 64
sample_rate = 2048
{dataset_extra}

[synth]
duration_s = 2.5
shaft_hz = 80
snr_db = {snr}
resonance_hz = {resonance}
decay = 400

[output]
run_dir = "{run}"
"#
    )
}

fn desk_dataset_res(root: &str, run: &str, extra: &str, resonance: u32) -> String {
    desk_dataset_full(root, run, extra, resonance, 10.0)
}

fn phase_a() {
    // C8: desk classifier, no augmentation. args: image lr batch epochs wide s1 s2
    let a: Vec<String> = std::env::args().skip(2).collect();
    let image: u32 = a.first().map_or(32, |v| v.parse().unwrap());
    let lr: f64 = a.get(1).map_or(1e-3, |v| v.parse().unwrap());
    let batch: u32 = a.get(2).map_or(16, |v| v.parse().unwrap());
    let epochs: u32 = a.get(3).map_or(20, |v| v.parse().unwrap());
    let wide: u32 = a.get(4).map_or(8, |v| v.parse().unwrap());
    let s1: u32 = a.get(5).map_or(16, |v| v.parse().unwrap());
    let s2: u32 = a.get(6).map_or(32, |v| v.parse().unwrap());
    let resonance: u32 = a.get(7).map_or(450, |v| v.parse().unwrap());
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let run = tmp.path().join("run");
    let mut doc = desk_dataset_res(root.to_str().unwrap(), run.to_str().unwrap(), "", resonance);
    doc.push_str(&format!(
        r#"
[encode]
image_size = {image}

[model]
wide_filters = {wide}
stage_filters = [{s1}, {s2}]
se_reduction = 4

[train]
epochs = {epochs}
batch_size = {batch}
lr = {lr}
augment = false
seed = 3
"#,
    ));
    let config = parse_config(&doc, &[]).unwrap();
    let t0 = Instant::now();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    println!("synth+encode: {:.1?}", t0.elapsed());
    let t1 = Instant::now();
    let out = cmd_train_classifier(&config).unwrap();
    println!("train: {:.1?}  {}", t1.elapsed(), out.message);
    let t2 = Instant::now();
    let ev = cmd_evaluate(&config).unwrap();
    println!("evaluate: {:.1?}  {}", t2.elapsed(), ev.message);
    println!("total: {:.1?}", t0.elapsed());
    let hist = std::fs::read_to_string(run.join("classifier/history.csv")).unwrap();
    println!("{hist}");
}

#[allow(clippy::too_many_arguments)]
fn arm(root: &str, run: &str, image: u32, gan_steps: u64, train_seed: u64, augment: bool, epochs: u32, resonance: u32, snr: f64, gan_base: u32) -> String {
    let mut doc = desk_dataset_full(
        root,
        run,
        "train_fraction = 0.125\nval_fraction = 0.25\ntest_fraction = 0.625",
        resonance,
        snr,
    );
    doc.push_str(&format!(
        r#"
[encode]
image_size = {image}

[gan]
z_dim = 32
base_channels = {gan_base}
batch_size = 8
total_gen_steps = {gan_steps}
critic_steps_per_gen = 5
learning_rate = 2e-3
samples_per_class = 200
seed = 99

[model]
wide_filters = 8
stage_filters = [16, 32]
se_reduction = 4

[train]
epochs = {epochs}
batch_size = 16
lr = 1e-3
augment = {augment}
seed = {train_seed}
"#
    ));
    doc
}

fn phase_b() {
    // C9: 10 train windows/class, GAN augmentation arms.
    // args: image gan_steps
    let a: Vec<String> = std::env::args().skip(2).collect();
    let image: u32 = a.first().map_or(32, |v| v.parse().unwrap());
    let gan_steps: u64 = a.get(1).map_or(300, |v| v.parse().unwrap());
    let epochs: u32 = a.get(2).map_or(20, |v| v.parse().unwrap());
    let resonance: u32 = a.get(3).map_or(450, |v| v.parse().unwrap());
    let snr: f64 = a.get(4).map_or(10.0, |v| v.parse().unwrap());
    let gan_base: u32 = a.get(5).map_or(8, |v| v.parse().unwrap());
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let run = tmp.path().join("run");
    let (root, run) = (root.to_str().unwrap(), run.to_str().unwrap());

    // Shared stages: dataset, encode, GAN, synthetic pool (gan.seed fixed).
    let base = arm(root, run, image, gan_steps, 3, true, epochs, resonance, snr, gan_base);
    let config = parse_config(&base, &[]).unwrap();
    let t0 = Instant::now();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    cmd_train_gan(&config).unwrap();
    println!("gan: {:.1?}", t0.elapsed());
    let ta = Instant::now();
    cmd_augment(&config).unwrap();
    println!("augment: {:.1?}", ta.elapsed());
    let fid = std::fs::read_to_string(std::path::Path::new(run).join("augmented/fidelity.json"))
        .unwrap();
    println!("fidelity: {fid}");

    for train_seed in [3u64, 4, 5] {
        for augment in [true, false] {
            let doc = arm(root, run, image, gan_steps, train_seed, augment, epochs, resonance, snr, gan_base);
            let config = parse_config(&doc, &[]).unwrap();
            let t1 = Instant::now();
            let out = cmd_train_classifier(&config).unwrap();
            let ev = cmd_evaluate(&config).unwrap();
            println!(
                "seed {train_seed} aug={augment} train+eval {:.1?}: {} | {}",
                t1.elapsed(),
                out.message,
                ev.message
            );
        }
    }
    println!("phase b total: {:.1?}", t0.elapsed());
}

fn phase_c() {
    // C10: 2-class GAN at 32 px, 500 gen steps, batch 8, base 8, z 32, 3 seeds.
    let mut w_early = Vec::new();
    let mut w_final = Vec::new();
    let mut grad_norms: Vec<f64> = Vec::new();
    for seed in [11u64, 12, 13] {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("data");
        let run = tmp.path().join("run");
        let mut doc = desk_dataset_res(
            root.to_str().unwrap(),
            run.to_str().unwrap(),
            "classes = [\"outer_race\", \"inner_race\"]",
            450,
        );
        doc.push_str(&format!(
            r#"
[encode]
image_size = 32

[gan]
z_dim = 32
base_channels = 8
batch_size = 8
total_gen_steps = 500
learning_rate = 2e-3
seed = {seed}
"#
        ));
        let config = parse_config(&doc, &[]).unwrap();
        let t0 = Instant::now();
        cmd_synth(&config).unwrap();
        cmd_encode(&config).unwrap();
        cmd_train_gan(&config).unwrap();
        println!("seed {seed} synth+encode+gan {:.1?}", t0.elapsed());
        let train_images = faultgram::gafenc::load_images(&run.join("encoded/train.fgc")).unwrap();
        let gan_dir = run.join("gan");
        let mut early = Vec::new();
        let mut fin = Vec::new();
        for (label, class) in ["outer_race", "inner_race"].iter().enumerate() {
            let path = faultgram::augment::metrics_path(&gan_dir, label);
            let text = std::fs::read_to_string(&path).unwrap();
            let mut w10 = None;
            let mut wend = None;
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                let step: u64 = cols[0].parse().unwrap();
                let w: f64 = cols[4].parse().unwrap();
                if step == 10 {
                    w10 = Some(w);
                }
                wend = Some(w);
            }
            println!(
                "  {class}: |W10|={:.4} |Wend|={:.4}",
                w10.unwrap().abs(),
                wend.unwrap().abs()
            );
            early.push(w10.unwrap().abs());
            fin.push(wend.unwrap().abs());

            let ck = faultgram::augment::load_gan_checkpoint(
                &faultgram::augment::checkpoint_path(&gan_dir, label),
            )
            .unwrap();
            let critic =
                faultgram::augment::CriticNet::from_arrays(&ck.critic, &ck.config).unwrap();
            let real: Vec<&faultgram::gafenc::GafImage> = train_images
                .iter()
                .filter(|im| im.label == label)
                .take(ck.config.batch_size)
                .collect();
            let p = ck.config.image_size;
            let mut real_data = ndarray::ArrayD::zeros(ndarray::IxDyn(&[real.len(), 1, p, p]));
            for (i, im) in real.iter().enumerate() {
                for ((r, c), &v) in im.pixels.indexed_iter() {
                    real_data[[i, 0, r, c]] = v;
                }
            }
            let real_t = faultgram::autodiff::Tensor::constant(real_data);
            let fakes = faultgram::augment::generate_samples(&ck, real.len(), 0xacc7 + seed);
            let mut fake_data = ndarray::ArrayD::zeros(ndarray::IxDyn(&[fakes.len(), 1, p, p]));
            for (i, im) in fakes.iter().enumerate() {
                for ((r, c), &v) in im.pixels.indexed_iter() {
                    fake_data[[i, 0, r, c]] = v;
                }
            }
            let fake_t = faultgram::autodiff::Tensor::constant(fake_data);
            let xhat =
                faultgram::augment::interpolate_samples(&real_t, &fake_t, 0xeb + seed).unwrap();
            let shape = xhat.shape().to_vec();
            let n = shape[0];
            let per: usize = shape.iter().skip(1).product();
            let xv = faultgram::autodiff::Tensor::var(xhat.data().clone());
            let scores = critic.forward(&xv);
            let g = faultgram::autodiff::grad(&scores.sum_all(), &[&xv]).remove(0);
            let flat: Vec<f64> = g.data().iter().copied().collect();
            for i in 0..n {
                let norm = flat[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                grad_norms.push(norm);
            }
        }
        w_early.push(early.iter().sum::<f64>() / early.len() as f64);
        w_final.push(fin.iter().sum::<f64>() / fin.len() as f64);
    }
    let med = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    println!("per-seed mean |W10|: {w_early:?}");
    println!("per-seed mean |Wend|: {w_final:?}");
    println!("median |W10|={:.4} |Wend|={:.4}", med(w_early.clone()), med(w_final.clone()));
    let mut sorted = grad_norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "grad norms: n={} min={:.3} median={:.3} max={:.3}",
        sorted.len(),
        sorted[0],
        med(grad_norms.clone()),
        sorted[sorted.len() - 1]
    );
}

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "a".into());
    match phase.as_str() {
        "a" => phase_a(),
        "b" => phase_b(),
        "c" => phase_c(),
        _ => eprintln!("unknown phase"),
    }
}
