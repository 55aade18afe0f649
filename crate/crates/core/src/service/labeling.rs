//! Labeling-candidate store backing human screening.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::store::{Store, CANDIDATES};
use super::{timestamp, Clock};
use crate::error::{Error, ErrorCode, Result};
use crate::reference::{CandidateStatus, PatchLabelCandidate, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

/// Source filter: any candidate naming a source, or only those with
/// exactly one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFilter {
    Periodic,
    Heatmap,
    Both,
    PeriodicOnly,
    HeatmapOnly,
}

impl SourceFilter {
    fn matches(self, c: &PatchLabelCandidate) -> bool {
        let p = c.sources.contains(&Source::Periodic);
        let h = c.sources.contains(&Source::Heatmap);
        match self {
            SourceFilter::Periodic => p,
            SourceFilter::Heatmap => h,
            SourceFilter::Both => p && h,
            SourceFilter::PeriodicOnly => p && !h,
            SourceFilter::HeatmapOnly => h && !p,
        }
    }
}

impl FromStr for SourceFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::new(ErrorCode::InvalidConfig, format!("unknown source filter {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFilter {
    pub status: Option<CandidateStatus>,
    pub sources: Option<SourceFilter>,
}

pub struct LabelingStore {
    clock: Arc<dyn Clock>,
    store: Option<Arc<Store>>,
    mem: Mutex<BTreeMap<String, PatchLabelCandidate>>,
}

impl LabelingStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        LabelingStore {
            clock,
            store: None,
            mem: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_store(clock: Arc<dyn Clock>, store: Arc<Store>) -> Result<Self> {
        let mem = store.all::<PatchLabelCandidate>(CANDIDATES)?.into_iter().collect();
        Ok(LabelingStore {
            clock,
            store: Some(store),
            mem: Mutex::new(mem),
        })
    }

    /// Adds candidates whose id is new; returns how many were added.
    pub fn import(&self, candidates: &[PatchLabelCandidate]) -> Result<usize> {
        let mut m = self.mem.lock().expect("candidates");
        let mut added = 0;
        for c in candidates {
            if m.contains_key(&c.id) {
                continue;
            }
            if let Some(s) = &self.store {
                s.put(CANDIDATES, &c.id, c)?;
            }
            m.insert(c.id.clone(), c.clone());
            added += 1;
        }
        Ok(added)
    }

    pub fn list(&self, filter: &CandidateFilter) -> Vec<PatchLabelCandidate> {
        self.mem
            .lock()
            .expect("candidates")
            .values()
            .filter(|c| filter.status.is_none_or(|s| c.status == s))
            .filter(|c| filter.sources.is_none_or(|f| f.matches(c)))
            .cloned()
            .collect()
    }

    pub fn get(&self, id: &str) -> Result<PatchLabelCandidate> {
        self.mem
            .lock()
            .expect("candidates")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::new(ErrorCode::UnknownCandidate, format!("candidate {id} is not known")))
    }

    /// Decides a pending candidate exactly once.
    pub fn decide(&self, id: &str, decision: Decision, decided_by: &str) -> Result<PatchLabelCandidate> {
        let mut m = self.mem.lock().expect("candidates");
        let c = m
            .get_mut(id)
            .ok_or_else(|| Error::new(ErrorCode::UnknownCandidate, format!("candidate {id} is not known")))?;
        if c.status != CandidateStatus::Pending {
            return Err(Error::new(
                ErrorCode::Conflict,
                format!("candidate {id} was already decided by {}", c.decided_by.as_deref().unwrap_or("?")),
            ));
        }
        let mut next = c.clone();
        next.status = match decision {
            Decision::Accept => CandidateStatus::Accepted,
            Decision::Reject => CandidateStatus::Rejected,
        };
        next.decided_by = Some(decided_by.to_string());
        next.decided_at = Some(timestamp(self.clock.now()));
        if let Some(s) = &self.store {
            s.put(CANDIDATES, id, &next)?;
        }
        *c = next.clone();
        Ok(next)
    }

    pub fn accepted(&self) -> Vec<PatchLabelCandidate> {
        self.list(&CandidateFilter {
            status: Some(CandidateStatus::Accepted),
            sources: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BBox;
    use crate::reference::PatchLabel;
    use crate::service::ManualClock;
    use std::collections::BTreeSet;

    fn cand(id: &str, sources: &[Source]) -> PatchLabelCandidate {
        PatchLabelCandidate {
            id: id.into(),
            image_id: "img".into(),
            patch: BBox::new(0, 0, 224, 224),
            proposed_label: PatchLabel::Defect,
            sources: sources.iter().copied().collect::<BTreeSet<_>>(),
            status: CandidateStatus::Pending,
            decided_by: None,
            decided_at: None,
        }
    }

    fn store() -> LabelingStore {
        let s = LabelingStore::in_memory(Arc::new(ManualClock::new(0.0)));
        s.import(&[
            cand("a", &[Source::Periodic]),
            cand("b", &[Source::Periodic, Source::Heatmap]),
            cand("c", &[Source::Heatmap]),
        ])
        .unwrap();
        s
    }

    #[test]
    fn decide_once_then_conflict() {
        let s = store();
        let c = s.decide("a", Decision::Accept, "rev-1").unwrap();
        assert_eq!(c.status, CandidateStatus::Accepted);
        assert_eq!(c.decided_by.as_deref(), Some("rev-1"));
        assert!(c.decided_at.is_some());
        assert_eq!(s.decide("a", Decision::Reject, "rev-2").unwrap_err().code, ErrorCode::Conflict);
        assert_eq!(s.get("a").unwrap().status, CandidateStatus::Accepted);
        assert_eq!(s.decide("zz", Decision::Accept, "r").unwrap_err().code, ErrorCode::UnknownCandidate);
        assert_eq!(s.accepted().len(), 1);
    }

    #[test]
    fn filters() {
        let s = store();
        s.decide("b", Decision::Reject, "r").unwrap();
        let pending = s.list(&CandidateFilter {
            status: Some(CandidateStatus::Pending),
            sources: None,
        });
        assert_eq!(pending.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), vec!["a", "c"]);
        let only: Vec<_> = s
            .list(&CandidateFilter {
                status: None,
                sources: Some("periodic-only".parse().unwrap()),
            })
            .into_iter()
            .map(|c| c.id)
            .collect();
        assert_eq!(only, vec!["a"]);
        assert!("weird".parse::<SourceFilter>().is_err());
    }

    #[test]
    fn concurrent_reviewers_get_one_winner() {
        let s = Arc::new(store());
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let s = s.clone();
                std::thread::spawn(move || s.decide("c", Decision::Accept, &format!("rev-{i}")).is_ok())
            })
            .collect();
        let wins = handles.into_iter().filter(|_| true).map(|h| h.join().unwrap()).filter(|&w| w).count();
        assert_eq!(wins, 1);
    }

    #[test]
    fn decisions_persist() {
        let dir = tempfile::tempdir().unwrap();
        let db = Arc::new(Store::open(&dir.path().join("s.redb")).unwrap());
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(0.0));
        let s = LabelingStore::with_store(clock.clone(), db.clone()).unwrap();
        s.import(&[cand("a", &[Source::Periodic])]).unwrap();
        s.decide("a", Decision::Reject, "r").unwrap();
        let s2 = LabelingStore::with_store(clock, db).unwrap();
        assert_eq!(s2.get("a").unwrap().status, CandidateStatus::Rejected);
    }
}
