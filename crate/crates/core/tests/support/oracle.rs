//! Brute-force scalar re-computations of the caption metrics, written
//! without the library's data structures: n-grams are plain token vectors
//! and every count is a linear scan.

#![allow(dead_code)]

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if n == 0 || t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Sentence BLEU ×100 with add-one smoothing on empty higher orders.
pub fn bleu(cand: &str, refs: &[&str], n_max: usize, smooth: bool) -> f64 {
    let c = toks(cand);
    if c.is_empty() {
        return 0.0;
    }
    let rs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    let mut logp = 0.0;
    for n in 1..=n_max {
        let cg = grams(&c, n);
        let mut m = 0usize;
        for g in distinct(&cg) {
            let best = rs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
            m += count(&cg, &g).min(best);
        }
        let total = cg.len() as f64;
        let p = if m > 0 {
            m as f64 / total
        } else if smooth && n > 1 {
            1.0 / (total + 1.0)
        } else {
            return 0.0;
        };
        logp += p.ln() / n_max as f64;
    }
    let cl = c.len() as i64;
    let mut best_r = i64::MAX;
    for r in &rs {
        let rl = r.len() as i64;
        let better = (rl - cl).abs() < (best_r - cl).abs() || ((rl - cl).abs() == (best_r - cl).abs() && rl < best_r);
        if best_r == i64::MAX || better {
            best_r = rl;
        }
    }
    let bp = if cl > best_r { 1.0 } else { (1.0 - best_r as f64 / cl as f64).exp() };
    100.0 * bp * logp.exp()
}

/// Unsmoothed corpus BLEU ×100 from summed clipped counts.
pub fn corpus_bleu(pairs: &[(&str, Vec<&str>)], n_max: usize) -> f64 {
    let (mut cl, mut rl) = (0.0, 0.0);
    let mut m = vec![0.0; n_max];
    let mut t = vec![0.0; n_max];
    for (cand, refs) in pairs {
        let c = toks(cand);
        let rs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
        cl += c.len() as f64;
        let mut best = rs[0].len();
        for r in &rs {
            let (d, db) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < db || (d == db && r.len() < best) {
                best = r.len();
            }
        }
        rl += best as f64;
        for n in 1..=n_max {
            let cg = grams(&c, n);
            t[n - 1] += cg.len() as f64;
            for g in distinct(&cg) {
                let b = rs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
                m[n - 1] += count(&cg, &g).min(b) as f64;
            }
        }
    }
    if cl == 0.0 || m.iter().any(|&x| x == 0.0) {
        return 0.0;
    }
    let logp: f64 = (0..n_max).map(|i| (m[i] / t[i]).ln()).sum::<f64>() / n_max as f64;
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    100.0 * bp * logp.exp()
}

/// Document frequency over clip reference sets → ln N − ln max(1, df).
pub fn idf(sets: &[Vec<&str>], g: &[String]) -> f64 {
    let df = sets
        .iter()
        .filter(|set| set.iter().any(|r| count(&grams(&toks(r), g.len()), g) > 0))
        .count();
    (sets.len() as f64).ln() - (df.max(1) as f64).ln()
}

/// CIDEr-D (×10 convention) with an arbitrary weight function.
pub fn cider_with(cand: &str, refs: &[&str], weight: &dyn Fn(&[String]) -> f64) -> f64 {
    let c = toks(cand);
    let mut total = 0.0;
    for r in refs {
        let r = toks(r);
        let delta = c.len() as f64 - r.len() as f64;
        let pen = (-delta * delta / 72.0).exp();
        for n in 1..=4 {
            let (cg, rg) = (grams(&c, n), grams(&r, n));
            let mut space = distinct(&cg);
            for g in distinct(&rg) {
                if !space.contains(&g) {
                    space.push(g);
                }
            }
            let vc: Vec<f64> = space.iter().map(|g| count(&cg, g) as f64 * weight(g)).collect();
            let vr: Vec<f64> = space.iter().map(|g| count(&rg, g) as f64 * weight(g)).collect();
            let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
            total += cos * pen;
        }
    }
    10.0 * total / (4.0 * refs.len() as f64)
}

pub fn cider(cand: &str, refs: &[&str], sets: &[Vec<&str>]) -> f64 {
    cider_with(cand, refs, &|g| idf(sets, g))
}

pub fn mbleu(set: &[&str], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..set.len() {
        let rest: Vec<&str> = (0..set.len()).filter(|&j| j != i).map(|j| set[j]).collect();
        s += bleu(set[i], &rest, n, true);
    }
    s / set.len() as f64
}

pub fn div(set: &[&str], n: usize) -> f64 {
    let mut all = Vec::new();
    let mut words = 0;
    for s in set {
        let t = toks(s);
        words += t.len();
        all.extend(grams(&t, n));
    }
    if words == 0 {
        0.0
    } else {
        100.0 * distinct(&all).len() as f64 / words as f64
    }
}

pub fn vocab(captions: &[&str]) -> usize {
    let mut seen: Vec<String> = Vec::new();
    for c in captions {
        for w in toks(c) {
            if !seen.contains(&w) {
                seen.push(w);
            }
        }
    }
    seen.len()
}

/// Observed / expected count of `gram` in `eval`, expected being its
/// training count scaled by `test_size / train_size`.
pub fn count_ratio(train: &[&str], eval: &[&str], gram: &str, train_size: usize, test_size: usize) -> f64 {
    let g = toks(gram);
    let tally = |set: &[&str]| -> usize { set.iter().map(|s| count(&grams(&toks(s), g.len()), &g)).sum() };
    tally(eval) as f64 / (tally(train) as f64 * test_size as f64 / train_size as f64)
}
