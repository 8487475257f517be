//! Meeting scheduling: intersect availability windows one participant at a
//! time, then take the earliest start that fits the meeting length.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ProblemSpec, Window};

/// (min participants, max participants) per difficulty level.
const LEVELS: [(usize, usize); 4] = [(2, 3), (2, 4), (3, 5), (3, 6)];
const HORIZON: u32 = 24;

fn unpack(spec: &ProblemSpec) -> (&[Window], u32) {
    match spec {
        ProblemSpec::Schedule { windows, duration } => (windows, *duration),
        _ => unreachable!("schedule spec expected"),
    }
}

pub(super) fn sample_spec(rng: &mut ChaCha8Rng, difficulty: u8) -> ProblemSpec {
    let (lo, hi) = LEVELS[difficulty as usize];
    let n = rng.gen_range(lo..=hi);
    let windows = (0..n)
        .map(|_| {
            let s = rng.gen_range(0..HORIZON - 4);
            let e = rng.gen_range(s + 2..=(s + 12).min(HORIZON));
            (s, e)
        })
        .collect();
    ProblemSpec::Schedule {
        windows,
        duration: rng.gen_range(1..=4),
    }
}

pub(super) fn prompt(spec: &ProblemSpec) -> String {
    let (windows, duration) = unpack(spec);
    let mut s = String::from("Q: meet");
    for (i, (a, b)) in windows.iter().enumerate() {
        if i > 0 {
            s.push_str(" ;");
        }
        s.push_str(&format!(" {a} {b}"));
    }
    s.push_str(&format!(" ; len {duration}"));
    s
}

fn intersect(x: Option<Window>, y: Window) -> Option<Window> {
    let (a, b) = x?;
    let (s, e) = (a.max(y.0), b.min(y.1));
    (s < e).then_some((s, e))
}

fn show(w: Option<Window>) -> String {
    match w {
        Some((a, b)) => format!("{a} {b}"),
        None => "none".into(),
    }
}

fn running(spec: &ProblemSpec) -> Vec<Option<Window>> {
    let (windows, _) = unpack(spec);
    let mut v = vec![Some(windows[0])];
    for w in &windows[1..] {
        v.push(intersect(*v.last().unwrap(), *w));
    }
    v
}

pub(super) fn answer(spec: &ProblemSpec) -> String {
    let (_, duration) = unpack(spec);
    match running(spec).last().unwrap() {
        Some((s, e)) if e - s >= duration => s.to_string(),
        _ => "none".into(),
    }
}

pub(super) fn reference_bodies(spec: &ProblemSpec) -> Vec<String> {
    let (windows, _) = unpack(spec);
    let r = running(spec);
    windows[1..]
        .iter()
        .enumerate()
        .map(|(k, w)| format!("{} & {} = {}", show(r[k]), show(Some(*w)), show(r[k + 1])))
        .collect()
}

/// Reads a window (`s e` or `none`) at the front of `words`.
fn take_window<'a>(words: &'a [&'a str]) -> Option<(Option<Window>, &'a [&'a str])> {
    match words {
        ["none", rest @ ..] => Some((None, rest)),
        [a, b, rest @ ..] => Some((Some((a.parse().ok()?, b.parse().ok()?)), rest)),
        _ => None,
    }
}

fn parse_body(words: &[&str]) -> Option<(Option<Window>, Window, Option<Window>)> {
    let (x, rest) = take_window(words)?;
    let ["&", rest @ ..] = rest else { return None };
    let (y, rest) = take_window(rest)?;
    let ["=", rest @ ..] = rest else { return None };
    let (z, rest) = take_window(rest)?;
    if !rest.is_empty() {
        return None;
    }
    Some((x, y?, z))
}

pub(super) fn judge_steps(spec: &ProblemSpec, bodies: &[Vec<&str>]) -> Vec<bool> {
    let (windows, _) = unpack(spec);
    let truth = running(spec);
    let mut premise = Some(Some(windows[0]));
    let mut out = Vec::with_capacity(bodies.len());
    for (k, words) in bodies.iter().enumerate() {
        let parsed = parse_body(words);
        let expected = premise.unwrap_or_else(|| truth[k.min(truth.len() - 1)]);
        let ok = match (parsed, windows.get(k + 1)) {
            (Some((x, y, z)), Some(&want_y)) => x == expected && y == want_y && z == intersect(x, y),
            _ => false,
        };
        out.push(ok);
        premise = parsed.map(|(_, _, z)| z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ProblemSpec {
        ProblemSpec::Schedule {
            windows: vec![(9, 17), (10, 15), (12, 18)],
            duration: 2,
        }
    }

    #[test]
    fn worked_example() {
        assert_eq!(prompt(&spec()), "Q: meet 9 17 ; 10 15 ; 12 18 ; len 2");
        assert_eq!(
            reference_bodies(&spec()),
            vec!["9 17 & 10 15 = 10 15", "10 15 & 12 18 = 12 15"]
        );
        assert_eq!(answer(&spec()), "12");
    }

    #[test]
    fn empty_intersection_and_short_overlap() {
        let s = ProblemSpec::Schedule {
            windows: vec![(1, 4), (5, 9), (2, 3)],
            duration: 1,
        };
        assert_eq!(reference_bodies(&s)[1], "none & 2 3 = none");
        assert_eq!(answer(&s), "none");
        let s = ProblemSpec::Schedule {
            windows: vec![(1, 4), (3, 9)],
            duration: 2,
        };
        assert_eq!(answer(&s), "none");
    }

    #[test]
    fn judge_uses_stated_premises() {
        let w = |l: &[&'static str]| -> Vec<Vec<&'static str>> {
            l.iter().map(|s| s.split(' ').collect()).collect()
        };
        let ok = w(&["9 17 & 10 15 = 10 15", "10 15 & 12 18 = 12 15"]);
        assert_eq!(judge_steps(&spec(), &ok), vec![true, true]);
        let bad = w(&["9 17 & 10 15 = 10 14", "10 14 & 12 18 = 12 14"]);
        assert_eq!(judge_steps(&spec(), &bad), vec![false, true]);
        let junk = w(&["9 17 & 10", "10 15 & 12 18 = 12 15", "12 15 & 1 2 = none"]);
        assert_eq!(judge_steps(&spec(), &junk), vec![false, true, false]);
    }
}
