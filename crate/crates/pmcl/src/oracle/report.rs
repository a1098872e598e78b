//! Findings as plain text. A report carries everything a reader needs to
//! judge the failure (workload, observed state, both expected states, diff)
//! plus a final repro line with the exact crash coordinates. The text form
//! round-trips losslessly so reports can be stored, parsed back, and
//! re-executed.

use crate::oracle::check::Verdict;

const HEADER: &str = "crash finding";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BugReport {
    pub build: String,
    /// Fault build description, "none" for the fixed build.
    pub faults: String,
    pub verdict: Verdict,
    pub check: String,
    /// Index of the core call the crash interrupted.
    pub call: u64,
    pub mid_call: bool,
    /// Display form of the interrupted call.
    pub op: String,
    /// Canonical workload text (with its trailing newline).
    pub workload: String,
    pub observed: Vec<String>,
    pub expected_before: Vec<String>,
    pub expected_after: Vec<String>,
    pub detail: Vec<String>,
    /// Repro coordinates: workload id, fence sequence of the crash point,
    /// indices of the replayed units, and the subset cap in force.
    pub workload_id: String,
    pub point_seq: u64,
    pub subset: Vec<usize>,
    pub cap: Option<usize>,
}

fn push_section(out: &mut String, name: &str, lines: &[String]) {
    out.push_str(name);
    out.push_str(":\n");
    for l in lines {
        out.push_str("| ");
        out.push_str(l);
        out.push('\n');
    }
}

fn subset_text(subset: &[usize]) -> String {
    if subset.is_empty() {
        "-".to_string()
    } else {
        subset.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn cap_text(cap: Option<usize>) -> String {
    match cap {
        None => "none".to_string(),
        Some(n) => n.to_string(),
    }
}

impl BugReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str(&format!("build: {}\n", self.build));
        out.push_str(&format!("faults: {}\n", self.faults));
        out.push_str(&format!("verdict: {}\n", self.verdict));
        out.push_str(&format!("check: {}\n", self.check));
        out.push_str(&format!(
            "call: {} {}\n",
            self.call,
            if self.mid_call { "mid" } else { "boundary" }
        ));
        out.push_str(&format!("op: {}\n", self.op));
        let wl_lines: Vec<String> = self.workload.lines().map(|l| l.to_string()).collect();
        push_section(&mut out, "workload", &wl_lines);
        push_section(&mut out, "observed", &self.observed);
        push_section(&mut out, "expected-before", &self.expected_before);
        push_section(&mut out, "expected-after", &self.expected_after);
        push_section(&mut out, "detail", &self.detail);
        out.push_str(&format!(
            "repro: id={} point={} subset={} cap={}\n",
            self.workload_id,
            self.point_seq,
            subset_text(&self.subset),
            cap_text(self.cap),
        ));
        out
    }

    pub fn from_text(text: &str) -> Result<BugReport, String> {
        let mut lines = text.lines().peekable();
        let expect_kv = |line: Option<&str>, key: &str| -> Result<String, String> {
            let line = line.ok_or_else(|| format!("missing {key} line"))?;
            line.strip_prefix(&format!("{key}: "))
                .map(|v| v.to_string())
                .ok_or_else(|| format!("expected `{key}:` line, got `{line}`"))
        };
        match lines.next() {
            Some(HEADER) => {}
            other => return Err(format!("bad header: {other:?}")),
        }
        let build = expect_kv(lines.next(), "build")?;
        let faults = expect_kv(lines.next(), "faults")?;
        let verdict_s = expect_kv(lines.next(), "verdict")?;
        let verdict =
            Verdict::from_name(&verdict_s).ok_or_else(|| format!("bad verdict `{verdict_s}`"))?;
        let check = expect_kv(lines.next(), "check")?;
        let call_s = expect_kv(lines.next(), "call")?;
        let (call, mid_call) = match call_s.split_once(' ') {
            Some((n, "mid")) => (n.parse().map_err(|_| "bad call index")?, true),
            Some((n, "boundary")) => (n.parse().map_err(|_| "bad call index")?, false),
            _ => return Err(format!("bad call line `{call_s}`")),
        };
        let op = expect_kv(lines.next(), "op")?;

        let mut sections: Vec<Vec<String>> = Vec::new();
        for name in ["workload", "observed", "expected-before", "expected-after", "detail"] {
            match lines.next() {
                Some(l) if l == format!("{name}:") => {}
                other => return Err(format!("expected `{name}:` section, got {other:?}")),
            }
            let mut body = Vec::new();
            while let Some(l) = lines.peek() {
                match l.strip_prefix("| ") {
                    Some(rest) => {
                        body.push(rest.to_string());
                        lines.next();
                    }
                    None => break,
                }
            }
            sections.push(body);
        }
        let detail = sections.pop().unwrap();
        let expected_after = sections.pop().unwrap();
        let expected_before = sections.pop().unwrap();
        let observed = sections.pop().unwrap();
        let workload_lines = sections.pop().unwrap();
        let mut workload = workload_lines.join("\n");
        workload.push('\n');

        let repro = lines.next().ok_or("missing repro line")?;
        let rest = repro.strip_prefix("repro: ").ok_or("bad repro line")?;
        let mut workload_id = None;
        let mut point_seq = None;
        let mut subset = None;
        let mut cap = None;
        for field in rest.split(' ') {
            let (k, v) = field.split_once('=').ok_or_else(|| format!("bad repro field `{field}`"))?;
            match k {
                "id" => workload_id = Some(v.to_string()),
                "point" => point_seq = Some(v.parse().map_err(|_| "bad point seq")?),
                "subset" => {
                    subset = Some(if v == "-" {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|s| s.parse().map_err(|_| format!("bad subset item `{s}`")))
                            .collect::<Result<Vec<usize>, _>>()?
                    });
                }
                "cap" => {
                    cap = Some(if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| "bad cap")?)
                    });
                }
                _ => return Err(format!("unknown repro field `{k}`")),
            }
        }
        if let Some(extra) = lines.next() {
            return Err(format!("trailing content after repro line: `{extra}`"));
        }
        Ok(BugReport {
            build,
            faults,
            verdict,
            check,
            call,
            mid_call,
            op,
            workload,
            observed,
            expected_before,
            expected_after,
            detail,
            workload_id: workload_id.ok_or("repro line missing id")?,
            point_seq: point_seq.ok_or("repro line missing point")?,
            subset: subset.ok_or("repro line missing subset")?,
            cap: cap.ok_or("repro line missing cap")?,
        })
    }

    /// Text with the repro line removed: the part of a report that describes
    /// the failure rather than its coordinates. Duplicate folding keys on
    /// this, so two findings fold only when they look identical to a reader.
    pub fn fold_text(&self) -> String {
        let full = self.to_text();
        match full.rfind("repro: ") {
            Some(i) => full[..i].to_string(),
            None => full,
        }
    }

    /// The identity of the underlying bug: fault build, verdict, failed
    /// check, interrupted call, and workload. Everything downstream of the
    /// crash coordinates (observed state, diffs, call index) varies point to
    /// point for one and the same bug, so clustering reads only this.
    pub fn triage_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("faults: {}\n", self.faults));
        out.push_str(&format!("verdict: {}\n", self.verdict));
        out.push_str(&format!("check: {}\n", self.check));
        out.push_str(&format!("op: {}\n", self.op));
        let wl_lines: Vec<String> = self.workload.lines().map(|l| l.to_string()).collect();
        push_section(&mut out, "workload", &wl_lines);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BugReport {
        BugReport {
            build: "pmcl-0.1.0+reffs-1".into(),
            faults: "F-RENAME-INPLACE".into(),
            verdict: Verdict::Mismatch,
            check: "rename atomicity".into(),
            call: 3,
            mid_call: true,
            op: "rename A/f B/g".into(),
            workload: "mkdir A\ncreat A/f\nsetup-done\nrename A/f B/g\n".into(),
            observed: vec!["dir A".into()],
            expected_before: vec!["dir A".into(), "file A/f size=0 links=1".into()],
            expected_after: vec!["dir A".into(), "file B/g size=0 links=1".into()],
            detail: vec!["pre: missing A/f".into(), "post: missing B/g".into()],
            workload_id: "00112233aabbccdd".into(),
            point_seq: 41,
            subset: vec![0, 2],
            cap: Some(2),
        }
    }

    #[test]
    fn text_roundtrip_is_bit_exact() {
        let r = sample();
        let text = r.to_text();
        let back = BugReport::from_text(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn empty_subset_and_no_cap_roundtrip() {
        let mut r = sample();
        r.subset = Vec::new();
        r.cap = None;
        r.mid_call = false;
        r.observed = Vec::new();
        let text = r.to_text();
        assert!(text.contains("subset=- cap=none"));
        assert!(text.contains("call: 3 boundary"));
        let back = BugReport::from_text(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn fold_text_drops_only_the_repro_line() {
        let r = sample();
        let t = r.fold_text();
        assert!(!t.contains("repro:"));
        assert!(t.contains("verdict: MISMATCH"));
        assert!(t.ends_with("post: missing B/g\n"));
    }

    #[test]
    fn triage_text_is_invariant_across_crash_coordinates() {
        let a = sample();
        let mut b = sample();
        b.call = 7;
        b.mid_call = false;
        b.point_seq = 99;
        b.subset = vec![1];
        b.observed = vec!["file B/g size=0 links=1".into()];
        b.detail = vec!["pre: unexpected B/g".into()];
        assert_eq!(a.triage_text(), b.triage_text());
        assert_ne!(a.fold_text(), b.fold_text());
        assert!(a.triage_text().contains("check: rename atomicity"));
        assert!(!a.triage_text().contains("observed"));
    }

    #[test]
    fn malformed_reports_are_rejected() {
        assert!(BugReport::from_text("nope").is_err());
        let r = sample();
        let broken = r.to_text().replace("verdict: MISMATCH", "verdict: BOGUS");
        assert!(BugReport::from_text(&broken).is_err());
        let truncated = r.to_text().replace("repro: ", "");
        assert!(BugReport::from_text(&truncated).is_err());
    }
}
