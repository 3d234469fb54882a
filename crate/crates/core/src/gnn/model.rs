//! The graph embedding network.
//!
//! Each convolution layer runs two attention passes over the bipartite
//! edges: entities attend to their linked actions, then actions attend to
//! their (already updated) linked entities. Attention scores follow the
//! GATv2 order, a learned vector applied after the nonlinearity of the joint
//! endpoint transform. A global node per graph starts as an affine map of the
//! root action's final state and attends to every action and entity for a
//! number of readout rounds; its L2-normalized state is the embedding.

use std::rc::Rc;

use rand::Rng;

use super::encode::{EncoderConfig, GraphBatch};
use super::GnnHyperparams;
use crate::neuralnet::{Parameters, Tape, Var};

const SCORE_SLOPE: f64 = 0.2;
const UPDATE_SLOPE: f64 = 0.01;

/// Creates parameters shaped for `hp`.
pub fn init_parameters(hp: &GnnHyperparams, enc: &EncoderConfig, rng: &mut impl Rng) -> Parameters {
    let d = hp.embedding_dim;
    let mut p = Parameters::default();
    p.add_dense("act_in.type", enc.buckets, d, rng);
    p.add_dense("act_in.num", 2, d, rng);
    p.add_zeros("act_in.bias", 1, d);
    p.add_dense("ent_in.type", enc.buckets, d, rng);
    p.add_dense("ent_in.step", enc.step_slots, d, rng);
    p.add_zeros("ent_in.bias", 1, d);
    for layer in 0..hp.conv_layers {
        for side in ["ent", "act"] {
            let n = format!("conv{layer}.{side}");
            p.add_dense(&format!("{n}.src"), d, d, rng);
            p.add_dense(&format!("{n}.tgt"), d, d, rng);
            p.add_dense(&format!("{n}.edge"), enc.buckets, d, rng);
            p.add_dense(&format!("{n}.attn"), 1, d, rng);
            p.add_dense(&format!("{n}.self"), d, d, rng);
            p.add_dense(&format!("{n}.mix"), d, d, rng);
            p.add_zeros(&format!("{n}.bias"), 1, d);
        }
    }
    p.add_dense("global.init", d, d, rng);
    p.add_zeros("global.bias", 1, d);
    for round in 0..hp.readout_rounds {
        let n = format!("readout{round}");
        p.add_dense(&format!("{n}.query"), d, d, rng);
        p.add_dense(&format!("{n}.key"), d, d, rng);
        p.add_dense(&format!("{n}.attn"), 1, d, rng);
        p.add_dense(&format!("{n}.self"), d, d, rng);
        p.add_dense(&format!("{n}.mix"), d, d, rng);
        p.add_zeros(&format!("{n}.bias"), 1, d);
    }
    p
}

/// One attention update of `targets` from `sources` over directed edges
/// `src[e] -> tgt[e]`.
#[allow(clippy::too_many_arguments)]
fn attend(
    t: &mut Tape,
    p: &Parameters,
    name: &str,
    heads: usize,
    sources: Var,
    targets: Var,
    src: &Rc<Vec<usize>>,
    tgt: &Rc<Vec<usize>>,
    edge_bucket: &Rc<Vec<usize>>,
    target_count: usize,
) -> Var {
    let w_src = t.param(p, &format!("{name}.src"));
    let w_tgt = t.param(p, &format!("{name}.tgt"));
    let w_edge = t.param(p, &format!("{name}.edge"));
    let attn = t.param(p, &format!("{name}.attn"));
    let w_self = t.param(p, &format!("{name}.self"));
    let w_mix = t.param(p, &format!("{name}.mix"));
    let bias = t.param(p, &format!("{name}.bias"));

    let src_h = t.matmul(sources, w_src);
    let tgt_h = t.matmul(targets, w_tgt);
    let src_e = t.gather_rows(src_h, src.clone());
    let tgt_e = t.gather_rows(tgt_h, tgt.clone());
    let edge_e = t.gather_rows(w_edge, edge_bucket.clone());
    let joint = t.add(src_e, tgt_e);
    let joint = t.add(joint, edge_e);
    let joint = t.leaky_relu(joint, SCORE_SLOPE);
    let scores = t.block_dot(joint, attn, heads);
    let alpha = t.segment_softmax(scores, tgt.clone(), target_count);
    let agg = t.segment_weighted_sum(src_e, alpha, tgt.clone(), target_count);

    let own = t.matmul(targets, w_self);
    let mixed = t.matmul(agg, w_mix);
    let sum = t.add(own, mixed);
    let sum = t.add_row(sum, bias);
    t.leaky_relu(sum, UPDATE_SLOPE)
}

/// Embeds every graph of `batch`; returns an `n_graphs × embedding_dim`
/// node with unit rows.
pub fn forward(t: &mut Tape, p: &Parameters, hp: &GnnHyperparams, batch: &GraphBatch) -> Var {
    let heads = hp.attention_heads;
    let n_act = batch.action_bucket.len();
    let n_ent = batch.entity_bucket.len();
    let n_graphs = batch.graph_count();

    let act_type = t.param(p, "act_in.type");
    let act_num = t.param(p, "act_in.num");
    let act_bias = t.param(p, "act_in.bias");
    let a_type = t.gather_rows(act_type, Rc::new(batch.action_bucket.clone()));
    let numeric = t.constant(batch.action_numeric.clone());
    let a_num = t.matmul(numeric, act_num);
    let actions = t.add(a_type, a_num);
    let actions = t.add_row(actions, act_bias);
    let mut actions = t.leaky_relu(actions, UPDATE_SLOPE);

    let ent_type = t.param(p, "ent_in.type");
    let ent_step = t.param(p, "ent_in.step");
    let ent_bias = t.param(p, "ent_in.bias");
    let e_type = t.gather_rows(ent_type, Rc::new(batch.entity_bucket.clone()));
    let e_step = t.gather_rows(ent_step, Rc::new(batch.entity_step_slot.clone()));
    let entities = t.add(e_type, e_step);
    let entities = t.add_row(entities, ent_bias);
    let mut entities = t.leaky_relu(entities, UPDATE_SLOPE);

    let edge_action = Rc::new(batch.edge_action.clone());
    let edge_entity = Rc::new(batch.edge_entity.clone());
    let edge_bucket = Rc::new(batch.edge_bucket.clone());
    for layer in 0..hp.conv_layers {
        entities = attend(
            t,
            p,
            &format!("conv{layer}.ent"),
            heads,
            actions,
            entities,
            &edge_action,
            &edge_entity,
            &edge_bucket,
            n_ent,
        );
        actions = attend(
            t,
            p,
            &format!("conv{layer}.act"),
            heads,
            entities,
            actions,
            &edge_entity,
            &edge_action,
            &edge_bucket,
            n_act,
        );
    }

    let root_states = t.gather_rows(actions, Rc::new(batch.roots.clone()));
    let init = t.param(p, "global.init");
    let init_bias = t.param(p, "global.bias");
    let global = t.matmul(root_states, init);
    let mut global = t.add_row(global, init_bias);

    let nodes = t.concat_rows(actions, entities);
    let node_graph: Rc<Vec<usize>> = Rc::new(
        batch
            .action_graph
            .iter()
            .chain(&batch.entity_graph)
            .copied()
            .collect(),
    );
    for round in 0..hp.readout_rounds {
        let n = format!("readout{round}");
        let w_query = t.param(p, &format!("{n}.query"));
        let w_key = t.param(p, &format!("{n}.key"));
        let attn = t.param(p, &format!("{n}.attn"));
        let w_self = t.param(p, &format!("{n}.self"));
        let w_mix = t.param(p, &format!("{n}.mix"));
        let bias = t.param(p, &format!("{n}.bias"));

        let q = t.matmul(global, w_query);
        let q = t.gather_rows(q, node_graph.clone());
        let k = t.matmul(nodes, w_key);
        let joint = t.add(q, k);
        let joint = t.leaky_relu(joint, SCORE_SLOPE);
        let scores = t.block_dot(joint, attn, heads);
        let alpha = t.segment_softmax(scores, node_graph.clone(), n_graphs);
        let agg = t.segment_weighted_sum(k, alpha, node_graph.clone(), n_graphs);
        let own = t.matmul(global, w_self);
        let mixed = t.matmul(agg, w_mix);
        let sum = t.add(own, mixed);
        let sum = t.add_row(sum, bias);
        global = t.leaky_relu(sum, UPDATE_SLOPE);
    }
    t.l2_normalize_rows(global)
}
