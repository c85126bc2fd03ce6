//! Line parser for rule files.

use super::*;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    Fields,
    Irq,
    Dma,
    Rules,
}

fn syntax(line: usize, reason: impl Into<String>) -> DslError {
    DslError::Syntax {
        line,
        reason: reason.into(),
    }
}

/// Parse a full rule file into its register map and rules.
///
/// Section headers, dashed separators, `...` elision markers, `//` comments,
/// and blank lines are recognized; everything else must be a table row or a
/// rule. Entity resolution is deferred to [`resolve_rules`].
pub fn parse_rule_file(text: &str) -> Result<(RegisterMap, Vec<Rule>), DslError> {
    let mut map = RegisterMap::default();
    let mut rules = Vec::new();
    let mut section = Section::Fields;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find("//") {
            Some(pos) => raw[..pos].trim(),
            None => raw.trim(),
        };
        if line.is_empty()
            || line.chars().all(|c| c == '.')
            || (line.len() >= 4 && line.chars().all(|c| c == '-'))
        {
            continue;
        }
        if let Some(next) = section_header(line) {
            section = next;
            continue;
        }
        match section {
            Section::Fields => parse_field_row(line, line_no, &mut map)?,
            Section::Irq => {
                let (name, number) = parse_source_row(line, line_no)?;
                map.irq_sources.push(IrqSourceEntry { name, irq: number });
            }
            Section::Dma => {
                let (name, number) = parse_source_row(line, line_no)?;
                map.dma_sources.push(DmaSourceEntry { name, number });
            }
            Section::Rules => {
                let rule = parse_rule_line(line, line_no, rules.len())?;
                rules.push(rule);
            }
        }
    }
    Ok((map, rules))
}

fn section_header(line: &str) -> Option<Section> {
    let lower = line.to_ascii_lowercase();
    if lower == "fields" || lower.starts_with("field name") {
        Some(Section::Fields)
    } else if lower.starts_with("interrupt source") {
        Some(Section::Irq)
    } else if lower.starts_with("dma source") {
        Some(Section::Dma)
    } else if lower == "rules" {
        Some(Section::Rules)
    } else {
        None
    }
}

fn parse_number(tok: &str) -> Option<u32> {
    if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        tok.parse().ok()
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parse an entity token: `Reg[Field]`, `Reg`, `D[R]`, `#D[T]`, or `*`.
pub(super) fn parse_entity(tok: &str, line: usize) -> Result<EntityRef, DslError> {
    if tok == "*" {
        return Ok(EntityRef::always());
    }
    let (occupancy, body) = match tok.strip_prefix('#') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let (register, field) = match body.find('[') {
        Some(open) => {
            let close = body
                .rfind(']')
                .filter(|&c| c == body.len() - 1 && c > open)
                .ok_or_else(|| syntax(line, format!("malformed entity `{}`", tok)))?;
            (&body[..open], &body[open + 1..close])
        }
        None => (body, body),
    };
    if !is_identifier(register) || !is_identifier(field) {
        return Err(syntax(line, format!("malformed entity `{}`", tok)));
    }
    let kind = match (register, field, occupancy) {
        ("D", "R", false) => EntityKind::RxBuffer,
        ("D", "T", false) => EntityKind::TxBuffer,
        ("D", "R", true) => EntityKind::RxOccupancy,
        ("D", "T", true) => EntityKind::TxOccupancy,
        (_, _, true) => {
            return Err(syntax(
                line,
                format!("`#` is only valid on D[R]/D[T], got `{}`", tok),
            ))
        }
        _ => EntityKind::Field,
    };
    Ok(EntityRef {
        register: register.to_string(),
        field: field.to_string(),
        kind,
    })
}

fn parse_field_row(line: &str, line_no: usize, map: &mut RegisterMap) -> Result<(), DslError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 3 {
        return Err(syntax(line_no, "field row needs NAME ADDRESS BITS"));
    }
    let entity = parse_entity(tokens[0], line_no)?;
    if entity.is_always() || entity.is_occupancy() {
        return Err(syntax(line_no, "field table rows name registers or buffers"));
    }
    let address = parse_number(tokens[1])
        .ok_or_else(|| syntax(line_no, format!("bad address `{}`", tokens[1])))?;
    let bits = parse_bits(tokens[2], line_no)?;
    let mut access = None;
    let mut reset = None;
    for tok in &tokens[3..] {
        match *tok {
            "RO" => access = Some(Access::ReadOnly),
            "WO" => access = Some(Access::WriteOnly),
            "RW" => access = Some(Access::ReadWrite),
            other => match parse_number(other) {
                Some(v) => reset = Some(v),
                None => return Err(syntax(line_no, format!("bad field column `{}`", other))),
            },
        }
    }
    if map.entry(&entity.register, &entity.field).is_some() {
        return Err(DslError::DuplicateEntity {
            line: line_no,
            name: entity.to_string(),
        });
    }
    map.entities.push(FieldEntry {
        entity,
        address,
        bits,
        access,
        reset,
    });
    Ok(())
}

fn parse_bits(tok: &str, line: usize) -> Result<BitSpec, DslError> {
    if tok == "*" {
        return Ok(BitSpec::Whole);
    }
    if let Some((lo, hi)) = tok.split_once('-') {
        let lo: u8 = lo
            .parse()
            .map_err(|_| syntax(line, format!("bad bit range `{}`", tok)))?;
        let hi: u8 = hi
            .parse()
            .map_err(|_| syntax(line, format!("bad bit range `{}`", tok)))?;
        if lo > hi || hi > 31 {
            return Err(syntax(line, format!("bad bit range `{}`", tok)));
        }
        return Ok(BitSpec::Range(lo, hi));
    }
    let bit: u8 = tok
        .parse()
        .map_err(|_| syntax(line, format!("bad bit index `{}`", tok)))?;
    if bit > 31 {
        return Err(syntax(line, format!("bit index {} out of range", bit)));
    }
    Ok(BitSpec::Bit(bit))
}

/// Source tables: the trailing token is the number, the rest is the name.
fn parse_source_row(line: &str, line_no: usize) -> Result<(String, u32), DslError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 2 {
        return Err(syntax(line_no, "source row needs NAME NUMBER"));
    }
    let number = parse_number(tokens[tokens.len() - 1])
        .ok_or_else(|| syntax(line_no, format!("bad source number `{}`", tokens[tokens.len() - 1])))?;
    Ok((tokens[..tokens.len() - 1].join(" "), number))
}

fn parse_rule_line(line: &str, line_no: usize, id: usize) -> Result<Rule, DslError> {
    let arrow = line
        .find("->")
        .ok_or_else(|| syntax(line_no, "rule is missing `->`"))?;
    let (cond_text, action_text) = (&line[..arrow], &line[arrow + 2..]);

    let mut predicates = Vec::new();
    for part in cond_text.split('&') {
        let part = part.trim();
        if part.is_empty() {
            return Err(syntax(line_no, "empty predicate"));
        }
        predicates.push(parse_predicate(part, line_no)?);
    }
    let mut actions = Vec::new();
    for part in action_text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(syntax(line_no, "empty action"));
        }
        actions.push(parse_action(part, line_no)?);
    }
    let external = predicates
        .iter()
        .filter(|p| matches!(p.trigger, Trigger::Buffer | Trigger::Write | Trigger::Read))
        .count();
    if external > 1 {
        return Err(syntax(
            line_no,
            "at most one B/W/R predicate is allowed per rule",
        ));
    }
    Ok(Rule {
        id,
        predicates,
        actions,
        source_text: line.to_string(),
    })
}

fn parse_predicate(text: &str, line: usize) -> Result<Predicate, DslError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let trigger = match tokens.first() {
        Some(&"B") => Trigger::Buffer,
        Some(&"W") => Trigger::Write,
        Some(&"R") => Trigger::Read,
        Some(&"V") => Trigger::ValueChange,
        Some(&"O") => Trigger::Other,
        other => {
            return Err(syntax(
                line,
                format!("unknown trigger `{}`", other.unwrap_or(&"")),
            ))
        }
    };
    if tokens.len() < 2 {
        return Err(syntax(line, "predicate is missing its entity"));
    }
    let lhs = parse_entity(tokens[1], line)?;
    let (op, rhs) = match tokens.len() {
        2 => (CompareOp::Any, Operand::Wildcard),
        4 => {
            let op = match tokens[2] {
                "==" => CompareOp::Eq,
                ">=" => CompareOp::Ge,
                "<=" => CompareOp::Le,
                ">" => CompareOp::Gt,
                "<" => CompareOp::Lt,
                other => return Err(syntax(line, format!("unknown operator `{}`", other))),
            };
            let rhs = parse_operand(tokens[3], line)?;
            if rhs == Operand::Wildcard {
                (CompareOp::Any, Operand::Wildcard)
            } else {
                (op, rhs)
            }
        }
        _ => return Err(syntax(line, format!("malformed predicate `{}`", text))),
    };
    if lhs.is_always() && op != CompareOp::Any {
        return Err(syntax(line, "`*` conditions cannot compare values"));
    }
    validate_predicate_shape(trigger, &lhs, line)?;
    Ok(Predicate {
        trigger,
        lhs,
        op,
        rhs,
    })
}

fn validate_predicate_shape(trigger: Trigger, lhs: &EntityRef, line: usize) -> Result<(), DslError> {
    match trigger {
        Trigger::Buffer if !lhs.is_occupancy() => Err(syntax(
            line,
            "B predicates test buffer occupancy (`#D[R]`/`#D[T]`)",
        )),
        Trigger::Write | Trigger::Read if lhs.is_occupancy() || lhs.is_always() => Err(syntax(
            line,
            "W/R predicates name a register field or data buffer",
        )),
        Trigger::ValueChange if lhs.kind != EntityKind::Field || lhs.is_always() => Err(syntax(
            line,
            "V predicates name a register field",
        )),
        _ => Ok(()),
    }
}

fn parse_operand(tok: &str, line: usize) -> Result<Operand, DslError> {
    if tok == "*" {
        return Ok(Operand::Wildcard);
    }
    if let Some(v) = parse_number(tok) {
        return Ok(Operand::Constant(v));
    }
    Ok(Operand::Entity(parse_entity(tok, line)?))
}

/// Actions accept `:=`, `=`, and the maintained-equality `==` spelling; all
/// three assign the right side to the left side when the rule fires.
fn parse_action(text: &str, line: usize) -> Result<Action, DslError> {
    let (lhs_text, rhs_text) = if let Some((l, r)) = text.split_once(":=") {
        (l, r)
    } else if let Some((l, r)) = text.split_once("==") {
        (l, r)
    } else if let Some((l, r)) = text.split_once('=') {
        (l, r)
    } else {
        return Err(syntax(line, format!("action `{}` has no assignment", text)));
    };
    let lhs_text = lhs_text.trim();
    let rhs_text = rhs_text.trim();
    if rhs_text.is_empty() {
        return Err(syntax(line, "action is missing a value"));
    }

    if let Some(source) = strip_bracketed(lhs_text, "IRQ") {
        return Ok(Action {
            target: ActionTarget::Irq(source.to_string()),
            value: parse_request_state(rhs_text, line)?,
        });
    }
    if let Some(source) = strip_bracketed(lhs_text, "DMA") {
        return Ok(Action {
            target: ActionTarget::Dma(source.to_string()),
            value: parse_request_state(rhs_text, line)?,
        });
    }

    let target = parse_entity(lhs_text, line)?;
    if target.is_always() || target.is_occupancy() || target.is_buffer() {
        return Err(syntax(
            line,
            format!("`{}` is not assignable", lhs_text),
        ));
    }
    let value = match parse_operand(rhs_text, line)? {
        Operand::Constant(c) => ActionValue::Constant(c),
        Operand::Entity(e) => ActionValue::Entity(e),
        Operand::Wildcard => ActionValue::BoundWildcard,
    };
    Ok(Action {
        target: ActionTarget::Entity(target),
        value,
    })
}

fn strip_bracketed<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.strip_prefix(prefix)
        .and_then(|rest| rest.strip_prefix('['))
        .and_then(|rest| rest.strip_suffix(']'))
        .filter(|name| is_identifier(name))
}

/// `Ready` is an alias for `Pending`.
fn parse_request_state(tok: &str, line: usize) -> Result<ActionValue, DslError> {
    let state = match tok {
        "Disable" => RequestState::Disable,
        "Enable" => RequestState::Enable,
        "Pending" | "Ready" => RequestState::Pending,
        other => {
            return Err(syntax(
                line,
                format!("`{}` is not a request state (Disable/Enable/Pending)", other),
            ))
        }
    };
    Ok(ActionValue::Request(state))
}
