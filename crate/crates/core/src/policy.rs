//! Stationary deterministic batching policies and their serialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smdp::StateSpace;

/// A stationary deterministic policy: one batch size per state, `0` meaning
/// wait. The last entry belongs to the overflow state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Policy {
    actions: Vec<usize>,
    b_max: usize,
}

impl Policy {
    /// Validates that every action is feasible at its state. The action
    /// vector covers `0..=s_max` plus the overflow state, so its length is
    /// `s_max + 2`.
    pub fn new(actions: Vec<usize>, b_max: usize) -> Result<Self> {
        if actions.len() < b_max + 2 {
            return Err(Error::Domain(format!(
                "policy over {} states cannot host b_max = {b_max}; need at least {}",
                actions.len(),
                b_max + 2
            )));
        }
        let space = StateSpace::new(actions.len() - 2, b_max)?;
        for (s, &a) in actions.iter().enumerate() {
            if !space.is_feasible(s, a) {
                return Err(Error::Domain(format!(
                    "action {a} infeasible at state {s} (max {})",
                    space.max_action(s)
                )));
            }
        }
        Ok(Self { actions, b_max })
    }

    pub fn action(&self, state: usize) -> usize {
        self.actions[state]
    }

    /// Action for a raw queue length; lengths beyond `s_max` reuse the
    /// overflow state's action, so simulation is never out of range.
    pub fn action_for_queue_len(&self, queue_len: usize) -> usize {
        self.actions[queue_len.min(self.actions.len() - 1)]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn num_states(&self) -> usize {
        self.actions.len()
    }

    pub fn s_max(&self) -> usize {
        self.actions.len() - 2
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    pub fn space(&self) -> StateSpace {
        StateSpace::new(self.s_max(), self.b_max).expect("validated at construction")
    }

    /// Re-expresses the policy over a larger truncation; the new interior
    /// states above the old `s_max` inherit the overflow action.
    pub fn extend_to(&self, s_max: usize) -> Result<Policy> {
        if s_max < self.s_max() {
            return Err(Error::Domain(format!(
                "cannot shrink policy from s_max {} to {s_max}",
                self.s_max()
            )));
        }
        let overflow_action = *self.actions.last().expect("nonempty");
        let mut actions = self.actions[..self.actions.len() - 1].to_vec();
        actions.resize(s_max + 2, overflow_action);
        Policy::new(actions, self.b_max)
    }

    /// Extension for deploying a solved policy on a wider model: interior
    /// actions are kept, while every state beyond the original truncation
    /// serves the maximum feasible batch.
    ///
    /// A solved overflow action prices the aggregated tail inside the
    /// truncated model's accounting (the abstract cost scales with the
    /// sojourn time, biasing it toward short batches) and need not drain the
    /// tail region when its states are realized individually; maximum
    /// batching is the one action whose service rate always exceeds a stable
    /// arrival rate.
    pub fn extend_draining(&self, s_max: usize) -> Result<Policy> {
        if s_max < self.s_max() {
            return Err(Error::Domain(format!(
                "cannot shrink policy from s_max {} to {s_max}",
                self.s_max()
            )));
        }
        let mut actions = self.actions[..self.actions.len() - 1].to_vec();
        actions.resize(s_max + 2, self.b_max);
        Policy::new(actions, self.b_max)
    }
}

/// Serve the maximum feasible batch whenever any request waits.
pub fn make_work_conserving(s_max: usize, b_max: usize) -> Result<Policy> {
    let space = StateSpace::new(s_max, b_max)?;
    let actions = (0..space.num_states())
        .map(|s| space.max_action(s))
        .collect();
    Policy::new(actions, b_max)
}

/// Always serve exactly `b`, waiting until `b` requests are present.
pub fn make_static(b: usize, s_max: usize, b_max: usize) -> Result<Policy> {
    if b < 1 || b > b_max {
        return Err(Error::Domain(format!(
            "static batch size {b} outside 1..={b_max}"
        )));
    }
    let space = StateSpace::new(s_max, b_max)?;
    let actions = (0..space.num_states())
        .map(|s| if space.queue_len(s) >= b { b } else { 0 })
        .collect();
    Policy::new(actions, b_max)
}

/// Wait below the control limit, serve the maximum feasible batch at or
/// above it.
pub fn make_control_limit(limit: usize, s_max: usize, b_max: usize) -> Result<Policy> {
    if limit < 1 {
        return Err(Error::Domain("control limit must be >= 1".into()));
    }
    let space = StateSpace::new(s_max, b_max)?;
    let actions = (0..space.num_states())
        .map(|s| {
            if space.queue_len(s) >= limit {
                space.max_action(s)
            } else {
                0
            }
        })
        .collect();
    Policy::new(actions, b_max)
}

/// Descriptions of constructible policies, as they appear in comparison
/// configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    WorkConserving,
    Static { b: usize },
    ControlLimit { limit: usize },
    Table { path: PathBuf },
}

impl PolicySpec {
    pub fn build(&self, s_max: usize, b_max: usize) -> Result<Policy> {
        match self {
            PolicySpec::WorkConserving => make_work_conserving(s_max, b_max),
            PolicySpec::Static { b } => make_static(*b, s_max, b_max),
            PolicySpec::ControlLimit { limit } => make_control_limit(*limit, s_max, b_max),
            PolicySpec::Table { path } => load_policy(path, b_max)?.extend_to(s_max),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::WorkConserving => "work_conserving".into(),
            PolicySpec::Static { b } => format!("static_{b}"),
            PolicySpec::ControlLimit { limit } => format!("control_limit_{limit}"),
            PolicySpec::Table { path } => format!("table_{}", path.display()),
        }
    }
}

/// Renders a policy as `s,action` CSV rows with a header.
pub fn policy_to_csv(policy: &Policy) -> String {
    let mut out = String::from("s,action\n");
    for (s, &a) in policy.actions().iter().enumerate() {
        out.push_str(&format!("{s},{a}\n"));
    }
    out
}

pub fn save_policy(path: impl AsRef<Path>, policy: &Policy) -> Result<()> {
    std::fs::write(path.as_ref(), policy_to_csv(policy))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))
}

/// Loads a two-column `s,action` CSV, skipping `#` comments and the header.
/// States must cover `0..n` exactly once and actions must be feasible.
pub fn load_policy(path: impl AsRef<Path>, b_max: usize) -> Result<Policy> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    parse_policy_csv(&text, b_max)
}

pub fn parse_policy_csv(text: &str, b_max: usize) -> Result<Policy> {
    let mut rows = Vec::new();
    for line in policy_data_lines(text) {
        let mut parts = line.split(',');
        let s = parse_field::<usize>(parts.next(), "state")?;
        let a = parse_field::<usize>(parts.next(), "action")?;
        if parts.next().is_some() {
            return Err(Error::Parse(format!(
                "policy row has more than two columns: {line:?}"
            )));
        }
        rows.push((s, a));
    }
    assemble_policy(rows, b_max)
}

/// Loads the `(rho, w1, w2)` slice of a five-column policy chart
/// (`rho,w1,w2,s,action`), the layout sweep outputs use.
pub fn load_policy_slice(
    path: impl AsRef<Path>,
    rho: f64,
    w1: f64,
    w2: f64,
    b_max: usize,
) -> Result<Policy> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let mut rows = Vec::new();
    for line in policy_data_lines(&text) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "policy chart row needs 5 columns: {line:?}"
            )));
        }
        let row_rho = parse_field::<f64>(Some(fields[0]), "rho")?;
        let row_w1 = parse_field::<f64>(Some(fields[1]), "w1")?;
        let row_w2 = parse_field::<f64>(Some(fields[2]), "w2")?;
        if close(row_rho, rho) && close(row_w1, w1) && close(row_w2, w2) {
            let s = parse_field::<usize>(Some(fields[3]), "state")?;
            let a = parse_field::<usize>(Some(fields[4]), "action")?;
            rows.push((s, a));
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!(
            "no rows match rho = {rho}, w1 = {w1}, w2 = {w2}"
        )));
    }
    assemble_policy(rows, b_max)
}

fn policy_data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| {
            // Header rows start with a non-numeric field.
            !l.split(',')
                .next()
                .is_some_and(|f| f.parse::<f64>().is_err())
        })
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str) -> Result<T> {
    field
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("missing {name} column")))?
        .parse()
        .map_err(|_| Error::Parse(format!("invalid {name} field")))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn assemble_policy(rows: Vec<(usize, usize)>, b_max: usize) -> Result<Policy> {
    let n = rows.len();
    if n < b_max + 2 {
        return Err(Error::Parse(format!(
            "policy needs at least {} states for b_max = {b_max}, found {n}",
            b_max + 2
        )));
    }
    let mut actions = vec![usize::MAX; n];
    for (s, a) in rows {
        if s >= n {
            return Err(Error::Parse(format!(
                "state {s} out of range for {n} rows; states must cover 0..{n}"
            )));
        }
        if actions[s] != usize::MAX {
            return Err(Error::Parse(format!("duplicate state {s}")));
        }
        actions[s] = a;
    }
    // Every slot filled exactly once since counts match and no duplicates.
    Policy::new(actions, b_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn work_conserving_serves_everything_available() {
        let p = make_work_conserving(40, 32).unwrap();
        assert_eq!(p.action(0), 0);
        assert_eq!(p.action(1), 1);
        assert_eq!(p.action(37), 32);
        assert_eq!(p.action_for_queue_len(500), 32);
    }

    #[test]
    fn static_policy_waits_for_a_full_batch() {
        let p = make_static(8, 40, 32).unwrap();
        assert_eq!(p.action(7), 0);
        assert_eq!(p.action(8), 8);
        assert_eq!(p.action(40), 8);
        assert_eq!(p.action(41), 8);
        assert!(make_static(0, 40, 32).is_err());
        assert!(make_static(33, 40, 32).is_err());
    }

    #[test]
    fn static_one_equals_work_conserving_below_capacity() {
        // Both serve a single request the moment the queue is nonempty only
        // when b_max = 1; with larger b_max they differ above state 1.
        let s1 = make_static(1, 4, 1).unwrap();
        let wc = make_work_conserving(4, 1).unwrap();
        assert_eq!(s1, wc);
    }

    #[test]
    fn control_limit_policy_shape() {
        let p = make_control_limit(3, 40, 32).unwrap();
        assert_eq!(p.action(2), 0);
        assert_eq!(p.action(3), 3);
        assert_eq!(p.action(35), 32);
        assert_eq!(p.action(41), 32);
        assert_eq!(
            make_control_limit(1, 40, 32).unwrap(),
            make_work_conserving(40, 32).unwrap()
        );
        assert!(make_control_limit(0, 40, 32).is_err());
    }

    #[test]
    fn policy_validation_rejects_infeasible_actions() {
        // Action 3 at state 2 exceeds min(s, b_max).
        let err = Policy::new(vec![0, 1, 3, 1, 1, 1], 4).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(Policy::new(vec![0, 1, 2, 2], 2).is_ok());
    }

    #[test]
    fn extend_keeps_interior_and_copies_overflow_action() {
        let p = make_control_limit(3, 10, 4).unwrap();
        let q = p.extend_to(20).unwrap();
        assert_eq!(q.s_max(), 20);
        for s in 0..=10 {
            assert_eq!(q.action(s), p.action(s));
        }
        for s in 11..=21 {
            assert_eq!(q.action(s), p.action(11));
        }
        assert!(p.extend_to(5).is_err());

        let d = p.extend_draining(20).unwrap();
        for s in 0..=10 {
            assert_eq!(d.action(s), p.action(s));
        }
        for s in 11..=21 {
            assert_eq!(d.action(s), 4);
        }
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let p = make_control_limit(5, 24, 8).unwrap();
        let dir = std::env::temp_dir().join("dynbatch-policy-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        save_policy(&path, &p).unwrap();
        let q = load_policy(&path, 8).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn load_rejects_infeasible_and_missing_states() {
        assert!(matches!(
            parse_policy_csv("s,action\n0,0\n1,1\n2,2\n3,3\n", 2),
            Err(Error::Domain(_))
        ));
        assert!(parse_policy_csv("s,action\n0,0\n0,0\n1,1\n2,2\n", 2).is_err());
        assert!(parse_policy_csv("s,action\n0,0\n1,1\n3,2\n4,2\n", 2).is_err());
    }

    #[test]
    fn chart_slice_loads_matching_rows() {
        let chart = "\
# config=deadbeef
rho,w1,w2,s,action
0.5,1,0,0,0
0.5,1,0,1,1
0.5,1,0,2,2
0.5,1,0,3,2
0.9,1,0,0,0
0.9,1,0,1,0
0.9,1,0,2,2
0.9,1,0,3,2
";
        let dir = std::env::temp_dir().join("dynbatch-policy-slice");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("chart.csv");
        std::fs::write(&path, chart).unwrap();
        let p = load_policy_slice(&path, 0.9, 1.0, 0.0, 2).unwrap();
        assert_eq!(p.actions(), &[0, 0, 2, 2]);
        assert!(load_policy_slice(&path, 0.7, 1.0, 0.0, 2).is_err());
    }
}
