use mffcn::model::{Architecture, Branch};

use crate::commands::Failed;

type Chw = (usize, usize, usize);

/// Input followed by the output of encoder layers 1 to 10.
const AUDIO: [Chw; 11] = [
    (1, 80, 20),
    (64, 40, 10),
    (64, 40, 10),
    (128, 20, 5),
    (128, 20, 5),
    (256, 10, 5),
    (256, 10, 5),
    (512, 5, 5),
    (512, 5, 5),
    (1024, 5, 1),
    (1024, 5, 1),
];

const VIDEO: [Chw; 11] = [
    (5, 80, 80),
    (64, 40, 20),
    (64, 40, 10),
    (128, 20, 5),
    (128, 20, 5),
    (256, 10, 5),
    (256, 10, 5),
    (512, 5, 5),
    (512, 5, 5),
    (1024, 5, 1),
    (1024, 5, 1),
];

const END: Chw = (1024, 5, 1);

fn fmt(s: Chw) -> String {
    format!("{}x{}x{}", s.0, s.1, s.2)
}

/// Compares one branch and returns the number of mismatching rows.
fn print_branch(name: &str, got: &[Chw], expected: &[Chw]) -> usize {
    println!("{name} branch");
    println!("  {:<6} {:>12} {:>12}", "layer", "traced", "expected");
    let mut bad = 0;
    for i in 0..got.len().max(expected.len()) {
        let layer = if i == 0 { "input".to_string() } else { format!("L{i}") };
        let g = got.get(i).map_or("-".into(), |&s| fmt(s));
        let e = expected.get(i).map_or("-".into(), |&s| fmt(s));
        let mark = if g == e { "" } else { "  MISMATCH" };
        bad += usize::from(g != e);
        println!("  {layer:<6} {g:>12} {e:>12}{mark}");
    }
    bad
}

pub fn trace_shapes() -> anyhow::Result<()> {
    let arch = Architecture::paper();
    let audio = arch.trace(Branch::Audio);
    let video = arch.trace(Branch::Video);
    let bad = print_branch("audio", &audio, &AUDIO) + print_branch("video", &video, &VIDEO);
    let ends = audio.last() == Some(&END) && video.last() == Some(&END);
    if bad > 0 || !ends {
        return Err(Failed(format!("shape trace differs from the expected table in {bad} rows")).into());
    }
    println!("both branches end at {}", fmt(END));
    Ok(())
}
