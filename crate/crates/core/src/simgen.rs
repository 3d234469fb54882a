//! Synthetic support-desk activity with labeled anomalous data queries.
//!
//! Every agent belongs to a team and works a daily shift. Tickets arrive
//! through the shift as a Poisson process; each ticket is opened by a fresh
//! customer and worked by the agent through one of three templates:
//!
//! * `direct`: assign and view, then a few rounds of replies, customer
//!   comments and views, with a query of the customer's data after one of
//!   the rounds;
//! * `transfer`: first assigned to a teammate who views it, then viewed and
//!   transferred by the agent, who continues as in `direct`;
//! * `no_query`: as `direct` without the query, routed directly or through
//!   a teammate in the same proportion as the query-bearing templates.
//!
//! A fraction of the queries are replaced by anomalous ones that mirror the
//! mutation catalog: a query on a customer with no ticket at all, a query on
//! a customer whose ticket belongs to somebody else, and a query that comes
//! before any of the ticket work that would justify it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActionRecord, EntityRef, Millis};
use crate::ranking::MutationKind;

const MS_PER_MINUTE: i64 = 60_000;
const MS_PER_HOUR: i64 = 60 * MS_PER_MINUTE;
const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;
const SHIFT_HOURS: f64 = 8.0;
const TEAMS: [&str; 8] = [
    "Billing", "Accounts", "Payments", "Devices", "Security", "Shipping", "Returns", "Plans",
];
const TOOLS: [&str; 3] = ["Knowledge.Search", "Macro.Apply", "Notes.Edit"];
const LOOKUP_TYPE: &str = "SupportConsole.Lookup";

pub const QUERY_TYPE: &str = "DataTool.Query";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowMix {
    pub direct: f64,
    pub transfer: f64,
    pub no_query: f64,
}

impl Default for WorkflowMix {
    fn default() -> Self {
        Self {
            direct: 0.26,
            transfer: 0.09,
            no_query: 0.65,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub agents: usize,
    pub days: usize,
    /// Mean tickets per agent per day.
    pub tickets_per_agent_day: f64,
    pub workflow_mix: WorkflowMix,
    /// Fraction of sensitive roots generated from anomaly templates.
    pub anomaly_prevalence: f64,
    pub seed: u64,
    /// Midnight UTC of the first simulated day.
    pub start_ms: Millis,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            agents: 100,
            days: 7,
            tickets_per_agent_day: 8.0,
            workflow_mix: WorkflowMix::default(),
            anomaly_prevalence: 0.02,
            seed: 7,
            // 2024-03-04T00:00:00Z
            start_ms: 1_709_510_400_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.agents < 2 || self.days == 0 {
            return bad("need at least two agents and one day".into());
        }
        if !(self.tickets_per_agent_day > 0.0 && self.tickets_per_agent_day.is_finite()) {
            return bad("tickets_per_agent_day must be positive".into());
        }
        let m = &self.workflow_mix;
        if [m.direct, m.transfer, m.no_query].iter().any(|w| !(*w >= 0.0)) {
            return bad("workflow weights must be non-negative".into());
        }
        if ((m.direct + m.transfer + m.no_query) - 1.0).abs() > 1e-9 {
            return bad("workflow weights must sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_prevalence) {
            return bad("anomaly_prevalence must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Generation label of a sensitive root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RootLabel {
    Normal,
    Anomaly(MutationKind),
}

impl RootLabel {
    pub fn is_anomaly(self) -> bool {
        matches!(self, RootLabel::Anomaly(_))
    }
}

impl fmt::Display for RootLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RootLabel::Normal => f.write_str("normal"),
            RootLabel::Anomaly(k) => {
                let s = serde_json::to_value(k).expect("unit enum serializes");
                f.write_str(s.as_str().expect("string tag"))
            }
        }
    }
}

impl FromStr for RootLabel {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "normal" {
            return Ok(RootLabel::Normal);
        }
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map(RootLabel::Anomaly)
            .map_err(|_| SimError::UnknownLabel(s.into()))
    }
}

impl From<RootLabel> for String {
    fn from(l: RootLabel) -> Self {
        l.to_string()
    }
}

impl TryFrom<String> for RootLabel {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    root_id: String,
    label: RootLabel,
}

/// Label of every sensitive root in a generated corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, RootLabel>,
}

impl GroundTruth {
    pub fn anomaly_count(&self) -> usize {
        self.labels.values().filter(|l| l.is_anomaly()).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.anomaly_count() as f64 / self.labels.len().max(1) as f64
    }

    /// `count` distinct anomalous roots drawn uniformly with `seed`, sorted.
    /// Fewer are returned when the corpus has fewer anomalies.
    pub fn pick_anomalies(&self, count: usize, seed: u64) -> Vec<String> {
        let anomalies: Vec<&String> = self
            .labels
            .iter()
            .filter(|(_, l)| l.is_anomaly())
            .map(|(id, _)| id)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<String> = anomalies
            .choose_multiple(&mut rng, count)
            .map(|s| (*s).clone())
            .collect();
        picked.sort();
        picked
    }

    /// Root id to "worth auditing".
    pub fn worth_auditing(&self) -> std::collections::HashMap<String, bool> {
        self.labels
            .iter()
            .map(|(id, l)| (id.clone(), l.is_anomaly()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), SimError> {
        let mut out = String::new();
        for (root_id, &label) in &self.labels {
            let row = TruthRow {
                root_id: root_id.clone(),
                label,
            };
            out.push_str(&serde_json::to_string(&row).expect("plain struct"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut labels = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: TruthRow = serde_json::from_str(line).map_err(|source| SimError::Json {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
            labels.insert(row.root_id, row.label);
        }
        Ok(Self { labels })
    }
}

#[derive(Debug, Clone)]
struct AgentStyle {
    team: usize,
    shift_start_h: f64,
    /// Mean hours from reading a ticket to querying the customer.
    query_lag_h: f64,
    /// Mean hours before answering a customer.
    reply_lag_h: f64,
    /// Multiplier on how long this agent's actions take.
    pace: f64,
    lookup_rate: f64,
}

#[derive(Debug, Clone)]
struct HandledUser {
    user: String,
    agents: Vec<usize>,
}

struct Generator<'a> {
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    records: Vec<ActionRecord>,
    truth: GroundTruth,
    next_action: usize,
    next_user: usize,
    next_ticket: usize,
    styles: Vec<AgentStyle>,
    /// Pace of the agent whose work is being emitted.
    pace: f64,
    /// Customers of the current day with the agents who touched them.
    today: Vec<HandledUser>,
}

fn agent_name(a: usize) -> String {
    format!("agent.{a}")
}

fn r(entity_type: &str, entity_id: &str, relationship: &str) -> EntityRef {
    EntityRef::new(entity_type, entity_id, relationship)
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let styles = (0..cfg.agents)
            .map(|a| AgentStyle {
                team: a % TEAMS.len(),
                shift_start_h: rng.random_range(6.0..14.0),
                query_lag_h: rng.random_range(0.05..0.5),
                reply_lag_h: rng.random_range(0.1..1.0),
                pace: LogNormal::new(0.0, 0.6).expect("valid").sample(&mut rng),
                lookup_rate: rng.random_range(0.2..0.9),
            })
            .collect();
        Self {
            cfg,
            rng,
            records: Vec::new(),
            truth: GroundTruth::default(),
            next_action: 0,
            next_user: 0,
            next_ticket: 0,
            styles,
            pace: 1.0,
            today: Vec::new(),
        }
    }

    fn exp_ms(&mut self, mean_h: f64) -> i64 {
        let d = Exp::new(1.0 / mean_h).expect("positive mean");
        (d.sample(&mut self.rng) * MS_PER_HOUR as f64).round() as i64
    }

    fn emit(&mut self, action_type: &str, start_ms: Millis, minutes: f64, refs: Vec<EntityRef>) -> String {
        let id = format!("act.{:07}", self.next_action);
        self.next_action += 1;
        let dur = (self.rng.random_range(0.2..1.0) * minutes * self.pace * MS_PER_MINUTE as f64).round() as i64;
        self.records.push(ActionRecord {
            id: id.clone(),
            action_type: action_type.into(),
            start_ms,
            end_ms: start_ms + dur,
            refs,
        });
        id
    }

    fn fresh_user(&mut self) -> String {
        self.next_user += 1;
        format!("user.{}", self.next_user)
    }

    fn fresh_ticket(&mut self) -> String {
        self.next_ticket += 1;
        format!("ticket.{}", self.next_ticket)
    }

    fn teammate(&mut self, a: usize) -> usize {
        let team = self.styles[a].team;
        let mates: Vec<usize> = (0..self.cfg.agents)
            .filter(|&b| b != a && self.styles[b].team == team)
            .collect();
        match mates.choose(&mut self.rng) {
            Some(&b) => b,
            None => (a + 1) % self.cfg.agents,
        }
    }

    /// Teams file tickets under their own case category.
    fn case_relationship(&self, a: usize) -> String {
        format!("{}_case", TEAMS[self.styles[a].team].to_lowercase())
    }

    fn query(&mut self, a: usize, user: &str, at: Millis) -> String {
        let agent = agent_name(a);
        if self.rng.random_bool(self.styles[a].lookup_rate) {
            let before = at - self.exp_ms(0.05).min(MS_PER_HOUR);
            self.emit(LOOKUP_TYPE, before, 3.0, vec![r("agent", &agent, "actor"), r("user", user, "subject")]);
        }
        self.emit(QUERY_TYPE, at, 2.0, vec![r("agent", &agent, "actor"), r("user", user, "subject")])
    }

    fn tool_use(&mut self, a: usize, ticket: &str, from: Millis, to: Millis) {
        let n = self.rng.random_range(0..=1);
        for _ in 0..n {
            let tool = *TOOLS.choose(&mut self.rng).expect("non-empty");
            let at = if to > from { self.rng.random_range(from..=to) } else { from };
            self.emit(tool, at, 5.0, vec![r("agent", &agent_name(a), "actor"), r("ticket", ticket, &self.case_relationship(a))]);
        }
    }

    /// Ticket lifecycle. Returns the customer. When `query` is set, a data
    /// query is made after the agent has opened the ticket; when
    /// `late_query` is set, the query happens before any ticket work.
    fn ticket(&mut self, a: usize, arrival: Millis, transfer: bool, query: bool, late_query: bool) -> String {
        let agent = agent_name(a);
        let user = self.fresh_user();
        let ticket = self.fresh_ticket();
        let case = self.case_relationship(a);
        let mut touched = vec![a];

        let mut t = arrival;
        if late_query {
            let root = self.query(a, &user, t);
            self.truth
                .labels
                .insert(root, RootLabel::Anomaly(MutationKind::TimeInvertJustification));
            t += self.exp_ms(0.5) + MS_PER_MINUTE;
        }
        self.emit(
            "TicketManagement.Create",
            t,
            4.0,
            vec![r("user", &user, "actor"), r("ticket", &ticket, &case)],
        );
        t += self.exp_ms(0.25) + MS_PER_MINUTE;
        if transfer {
            let b = self.teammate(a);
            touched.push(b);
            let other = agent_name(b);
            self.emit(
                "TicketManagement.Assign",
                t,
                1.0,
                vec![r("agent", &other, "assignee"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
            t += self.exp_ms(0.5) + MS_PER_MINUTE;
            self.emit(
                "TicketManagement.View",
                t,
                8.0,
                vec![r("agent", &other, "actor"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
            t += self.exp_ms(1.0) + MS_PER_MINUTE;
            self.emit(
                "TicketManagement.View",
                t,
                8.0,
                vec![r("agent", &agent, "actor"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
            t += self.exp_ms(0.3) + MS_PER_MINUTE;
            self.emit(
                "TicketManagement.Transfer",
                t,
                1.0,
                vec![r("agent", &agent, "actor"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
        } else {
            self.emit(
                "TicketManagement.Assign",
                t,
                1.0,
                vec![r("agent", &agent, "assignee"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
            t += self.exp_ms(0.3) + MS_PER_MINUTE;
            self.emit(
                "TicketManagement.View",
                t,
                8.0,
                vec![r("agent", &agent, "actor"), r("ticket", &ticket, &case), r("user", &user, "subject")],
            );
        }
        // Conversation rounds: the agent replies, the customer answers and
        // the agent reads the thread again. A normal query lands after one
        // of the rounds.
        let rounds = self.rng.random_range(2..=4);
        let query_round = (query && !late_query).then(|| self.rng.random_range(0..rounds));
        let both = |rel: &str| vec![r("agent", &agent, rel), r("ticket", &ticket, &case), r("user", &user, "subject")];
        for round in 0..rounds {
            let work_start = t;
            t += self.exp_ms(self.styles[a].reply_lag_h) + MS_PER_MINUTE;
            self.tool_use(a, &ticket, work_start, t);
            self.emit("TicketManagement.Reply", t, 10.0, both("actor"));
            t += self.exp_ms(0.7) + MS_PER_MINUTE;
            self.emit(
                "TicketManagement.Comment",
                t,
                6.0,
                vec![r("user", &user, "actor"), r("ticket", &ticket, &case)],
            );
            t += self.exp_ms(0.2) + MS_PER_MINUTE;
            self.emit("TicketManagement.View", t, 8.0, both("actor"));
            if query_round == Some(round) {
                t += self.exp_ms(self.styles[a].query_lag_h) + MS_PER_MINUTE;
                let root = self.query(a, &user, t);
                self.truth.labels.insert(root, RootLabel::Normal);
            }
        }
        self.today.push(HandledUser {
            user: user.clone(),
            agents: touched,
        });
        user
    }

    fn anomaly(&mut self, a: usize, arrival: Millis, transfer: bool) {
        let kind = *MutationKind::ALL.choose(&mut self.rng).expect("non-empty");
        match kind {
            MutationKind::DetachTicketContext => {
                let user = self.fresh_user();
                let root = self.query(a, &user, arrival);
                self.truth.labels.insert(root, RootLabel::Anomaly(kind));
            }
            MutationKind::SwapSubjectUser => {
                let others: Vec<String> = self
                    .today
                    .iter()
                    .filter(|h| !h.agents.contains(&a))
                    .map(|h| h.user.clone())
                    .collect();
                // Work a legitimate ticket, then look up somebody else's customer.
                self.ticket(a, arrival, transfer, false, false);
                let victim = match others.choose(&mut self.rng) {
                    Some(u) => u.clone(),
                    None => self.fresh_user(),
                };
                let at = arrival + self.exp_ms(0.5) + MS_PER_MINUTE;
                let root = self.query(a, &victim, at);
                self.truth.labels.insert(root, RootLabel::Anomaly(kind));
            }
            MutationKind::TimeInvertJustification => {
                self.ticket(a, arrival, transfer, true, true);
            }
        }
    }

    fn run(mut self) -> (Vec<ActionRecord>, GroundTruth) {
        let mix = self.cfg.workflow_mix.clone();
        let rate_per_h = self.cfg.tickets_per_agent_day / SHIFT_HOURS;
        for day in 0..self.cfg.days {
            self.today.clear();
            let midnight = self.cfg.start_ms + day as i64 * MS_PER_DAY;
            for a in 0..self.cfg.agents {
                let shift_start = midnight + (self.styles[a].shift_start_h * MS_PER_HOUR as f64) as i64;
                let shift_end = shift_start + (SHIFT_HOURS * MS_PER_HOUR as f64) as i64;
                let mut t = shift_start;
                self.pace = self.styles[a].pace;
                loop {
                    t += self.exp_ms(1.0 / rate_per_h);
                    if t >= shift_end {
                        break;
                    }
                    let u: f64 = self.rng.random();
                    if u < mix.no_query {
                        let routed = mix.transfer / (mix.transfer + mix.direct);
                        let transfer = routed > 0.0 && self.rng.random_bool(routed.min(1.0));
                        self.ticket(a, t, transfer, false, false);
                        continue;
                    }
                    let transfer = u >= mix.no_query + mix.direct;
                    if self.rng.random_bool(self.cfg.anomaly_prevalence) {
                        self.anomaly(a, t, transfer);
                    } else {
                        self.ticket(a, t, transfer, true, false);
                    }
                }
            }
        }
        self.records
            .sort_by(|x, y| (x.start_ms, &x.id).cmp(&(y.start_ms, &y.id)));
        (self.records, self.truth)
    }
}

/// Generates a corpus and the labels of its sensitive roots. The output is
/// a pure function of `cfg`.
pub fn generate(cfg: &SimConfig) -> Result<(Vec<ActionRecord>, GroundTruth), SimError> {
    cfg.validate()?;
    Ok(Generator::new(cfg).run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ActionStore;

    fn small() -> SimConfig {
        SimConfig {
            agents: 12,
            days: 2,
            anomaly_prevalence: 0.2,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_prevalence_is_all_normal() {
        let cfg = SimConfig {
            anomaly_prevalence: 0.0,
            ..small()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert!(!truth.labels.is_empty());
        assert_eq!(truth.anomaly_count(), 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        let text = |rs: &[ActionRecord]| rs.iter().map(ActionRecord::to_json_line).collect::<Vec<_>>();
        assert_eq!(text(&a), text(&b));
        assert_eq!(ta, tb);
    }

    #[test]
    fn output_is_a_valid_corpus_and_truth_covers_every_query() {
        let (records, truth) = generate(&small()).unwrap();
        let queries: Vec<String> = records
            .iter()
            .filter(|r| r.action_type == QUERY_TYPE)
            .map(|r| r.id.clone())
            .collect();
        for r in &records {
            r.validate().unwrap();
        }
        ActionStore::from_records(records).unwrap();
        assert_eq!(queries.len(), truth.labels.len());
        assert!(queries.iter().all(|q| truth.labels.contains_key(q)));
        let kinds: std::collections::BTreeSet<_> = truth.labels.values().collect();
        assert_eq!(kinds.len(), 4, "all three anomaly kinds and normal appear");
    }

    #[test]
    fn label_round_trip() {
        for l in [
            RootLabel::Normal,
            RootLabel::Anomaly(MutationKind::DetachTicketContext),
            RootLabel::Anomaly(MutationKind::SwapSubjectUser),
            RootLabel::Anomaly(MutationKind::TimeInvertJustification),
        ] {
            assert_eq!(l.to_string().parse::<RootLabel>().unwrap(), l);
        }
        assert!("weird".parse::<RootLabel>().is_err());
        let (_, truth) = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.jsonl");
        truth.write(&p).unwrap();
        assert_eq!(GroundTruth::read(&p).unwrap(), truth);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small();
        cfg.workflow_mix.direct = 0.9;
        assert!(generate(&cfg).is_err());
        let cfg = SimConfig {
            anomaly_prevalence: 1.0,
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }
}
