//! Plan-driven model scheduling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::registry::ModelRegistry;
use super::{DeploymentPlan, ModelKey, ModelStatus, NodeInfo, NodePolicy, Scope};
use crate::error::{Error, ErrorCode, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Load { node_id: String, model: ModelKey },
    Unload { node_id: String, model: ModelKey },
}

impl Action {
    pub fn node_id(&self) -> &str {
        match self {
            Action::Load { node_id, .. } | Action::Unload { node_id, .. } => node_id,
        }
    }
}

/// Rejects repeated scopes, unregistered or retired models, models
/// registered under another scope and unknown nodes.
pub fn validate_plan(plan: &DeploymentPlan, registry: &ModelRegistry, nodes: &BTreeMap<String, NodeInfo>) -> Result<()> {
    let mut scopes = BTreeSet::new();
    for e in &plan.entries {
        if !scopes.insert(&e.scope) {
            return Err(Error::new(
                ErrorCode::InvalidPlan,
                format!("scope {}/{} appears twice", e.scope.product_id, e.scope.layer_id),
            ));
        }
        let key = ModelKey::new(&e.model_id, &e.version);
        let d = registry
            .get(&key)
            .filter(|d| d.status != ModelStatus::Retired)
            .ok_or_else(|| Error::new(ErrorCode::UnknownModel, format!("model {key} is not registered or retired")))?;
        if d.scope != e.scope {
            return Err(Error::new(ErrorCode::InvalidPlan, format!("model {key} belongs to another scope")));
        }
        if let NodePolicy::Nodes(ids) = &e.assignment {
            if let Some(id) = ids.iter().find(|id| !nodes.contains_key(*id)) {
                return Err(Error::new(ErrorCode::UnknownNode, format!("plan names unknown node {id}")));
            }
        }
    }
    Ok(())
}

/// Actions that bring every node to the plan for the scopes the plan
/// names; other scopes are left alone. Per node, loads come before
/// unloads; nodes in id order, models in key order.
pub fn schedule_models(
    plan: &DeploymentPlan,
    registry: &ModelRegistry,
    nodes: &BTreeMap<String, NodeInfo>,
) -> Result<Vec<Action>> {
    validate_plan(plan, registry, nodes)?;
    let scope_of = |k: &ModelKey| -> Option<&Scope> { registry.get(k).map(|d| &d.scope) };
    let mut actions = Vec::new();
    for (id, node) in nodes {
        let mut loads = BTreeSet::new();
        let mut unloads = BTreeSet::new();
        for e in &plan.entries {
            let target = ModelKey::new(&e.model_id, &e.version);
            let wanted = match &e.assignment {
                NodePolicy::All => true,
                NodePolicy::Nodes(ids) => ids.contains(id),
            };
            if wanted && !node.loaded_models.contains(&target) {
                loads.insert(target.clone());
            }
            for k in &node.loaded_models {
                if scope_of(k) == Some(&e.scope) && (!wanted || *k != target) {
                    unloads.insert(k.clone());
                }
            }
        }
        actions.extend(loads.into_iter().map(|model| Action::Load {
            node_id: id.clone(),
            model,
        }));
        actions.extend(unloads.into_iter().map(|model| Action::Unload {
            node_id: id.clone(),
            model,
        }));
    }
    Ok(actions)
}
