//! Handlers are sugar for statements mapped over a mailbox.

use std::collections::BTreeMap;

use super::build::{dot, gen, let_, record, var};
use super::{Clause, Handler, HandlerMode, Program, Statement};
use crate::value::{MESSAGE_ID, PAYLOAD, REPLY_TO};

pub const RESPONSE_SUFFIX: &str = "<response>";

/// Variable bound to the current message in a desugared per-message handler.
pub const MSG_VAR: &str = "_msg";

pub fn response_mailbox(handler: &str) -> String {
    format!("{handler}{RESPONSE_SUFFIX}")
}

pub fn handler_of_response(mailbox: &str) -> Option<&str> {
    mailbox.strip_suffix(RESPONSE_SUFFIX)
}

/// Clauses that bind one message of `h`'s mailbox and its parameters.
pub fn message_clauses(h: &Handler) -> Vec<Clause> {
    let mut clauses = vec![gen(MSG_VAR, var(&h.name))];
    for p in &h.params {
        clauses.push(let_(&p.name, dot(MSG_VAR, &p.name)));
    }
    clauses.push(let_(MESSAGE_ID, dot(MSG_VAR, MESSAGE_ID)));
    clauses.push(let_(REPLY_TO, dot(MSG_VAR, REPLY_TO)));
    clauses
}

pub fn desugar_handler(h: &Handler) -> Vec<Statement> {
    if h.body.is_empty() {
        return Vec::new();
    }
    let body = desugar_statements(&h.body, &h.name);
    match h.mode {
        HandlerMode::PerMessage => {
            let mut clauses = message_clauses(h);
            if let Some(g) = &h.guard {
                clauses.push(Clause::Filter { cond: g.clone() });
            }
            vec![Statement::ForEach { clauses, body }]
        }
        HandlerMode::Batch => match &h.guard {
            Some(g) => vec![Statement::ForEach {
                clauses: vec![Clause::Filter { cond: g.clone() }],
                body,
            }],
            None => body,
        },
    }
}

/// Rewrites `Return` into a send to the handler's response mailbox.
/// Idempotent.
pub fn desugar_statements(stmts: &[Statement], handler: &str) -> Vec<Statement> {
    stmts.iter().map(|s| desugar_statement(s, handler)).collect()
}

fn desugar_statement(s: &Statement, handler: &str) -> Statement {
    match s {
        Statement::Return { value } => Statement::Send {
            mailbox: response_mailbox(handler),
            value: record([
                (MESSAGE_ID, var(MESSAGE_ID)),
                (PAYLOAD, value.clone()),
                (REPLY_TO, var(REPLY_TO)),
            ]),
            to: None,
        },
        Statement::ForEach { clauses, body } => Statement::ForEach {
            clauses: clauses.clone(),
            body: desugar_statements(body, handler),
        },
        other => other.clone(),
    }
}

pub fn desugar_program(p: &Program) -> BTreeMap<String, Vec<Statement>> {
    p.handlers.iter().map(|h| (h.name.clone(), desugar_handler(h))).collect()
}
