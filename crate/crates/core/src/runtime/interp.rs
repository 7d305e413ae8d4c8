//! Reference engine: walks the desugared IR directly, naive fixpoint.

use std::collections::BTreeMap;

use super::eval::{Ctx, Env};
use super::{active_statements, combine, leaf, Evaluated, RuntimeError, Snapshot};
use crate::ir::{stratify, Program, Statement};
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct Interpreter {
    /// Query groups in evaluation order.
    groups: Vec<(Vec<String>, bool)>,
}

impl Interpreter {
    pub fn new(p: &Program) -> Result<Interpreter, RuntimeError> {
        let strata = stratify(p).map_err(|e| RuntimeError::Unstratifiable(e.to_string()))?;
        let mut groups: Vec<_> = strata.groups.iter().collect();
        groups.sort_by_key(|g| g.stratum);
        Ok(Interpreter {
            groups: groups.into_iter().map(|g| (g.queries.clone(), g.recursive)).collect(),
        })
    }

    pub fn evaluate(&self, snap: &Snapshot<'_>) -> Result<Evaluated, RuntimeError> {
        let mut out = Evaluated::default();
        let (queries, iterations) = self.queries(snap)?;
        out.queries = queries;
        out.iterations = iterations;
        let ctx = snap.ctx(&out.queries);
        let mut effects = Vec::new();
        let mut outbound = Vec::new();
        for (_, stmts) in active_statements(snap) {
            exec(&ctx, &stmts, &Env::empty(), &mut effects, &mut outbound)?;
        }
        out.effects = effects;
        out.outbound = outbound;
        Ok(out)
    }

    /// All query values and the total number of rounds spent.
    pub fn queries(&self, snap: &Snapshot<'_>) -> Result<(BTreeMap<String, Value>, usize), RuntimeError> {
        let p = snap.program;
        let mut values: BTreeMap<String, Value> = BTreeMap::new();
        let mut rounds = 0;
        for (names, recursive) in &self.groups {
            if !recursive {
                for q in names {
                    let v = eval_query(&snap.ctx(&values), p, q)?;
                    values.insert(q.clone(), v);
                }
                rounds += 1;
                continue;
            }
            for q in names {
                values.insert(q.clone(), Value::empty_set());
            }
            let mut n = 0;
            loop {
                n += 1;
                if n > snap.options.iteration_cap {
                    return Err(RuntimeError::FixpointDivergence {
                        group: names.join(","),
                        cap: snap.options.iteration_cap,
                    });
                }
                let mut next = BTreeMap::new();
                {
                    let ctx = snap.ctx(&values);
                    for q in names {
                        let v = combine(values[q].clone(), eval_query(&ctx, p, q)?)?;
                        next.insert(q.clone(), v);
                    }
                }
                let changed = names.iter().any(|q| next[q] != values[q]);
                values.extend(next);
                if !changed {
                    break;
                }
            }
            rounds += n;
        }
        Ok((values, rounds))
    }
}

fn eval_query(ctx: &Ctx<'_>, p: &Program, name: &str) -> Result<Value, RuntimeError> {
    let q = p.query(name).ok_or_else(|| RuntimeError::Eval(format!("unknown query {name}")))?;
    let mut acc = Value::empty_set();
    for body in &q.bodies {
        acc = combine(acc, ctx.eval(body, &Env::empty())?)?;
    }
    Ok(acc)
}

fn exec(
    ctx: &Ctx<'_>,
    stmts: &[Statement],
    env: &Env,
    effects: &mut Vec<super::Effect>,
    out: &mut Vec<super::Outbound>,
) -> Result<(), RuntimeError> {
    for s in stmts {
        match s {
            Statement::ForEach { clauses, body } => {
                ctx.for_bindings(clauses, env, &mut |b| exec(ctx, body, b, effects, out))?;
            }
            other => leaf(ctx, other, env, effects, out)?,
        }
    }
    Ok(())
}
