//! Token alphabet shared by the task generator and the model.
//!
//! Prompt tokens (prefix expressions) and program tokens (stack-machine code)
//! are disjoint. `SEP` separates prompt from response and `END` terminates
//! both programs and generation.

pub const SEP: usize = 0;
pub const END: usize = 1;
/// Prompt constants `0`..`9`.
pub const DIGIT: usize = 2;
/// Prompt variables `a`..`d`.
pub const VAR: usize = 12;
pub const PLUS: usize = 16;
pub const MINUS: usize = 17;
pub const TIMES: usize = 18;
/// `PUSH_0`..`PUSH_9`.
pub const PUSH: usize = 19;
/// `VAR_a`..`VAR_d`.
pub const LOAD: usize = 29;
pub const ADD: usize = 33;
pub const SUB: usize = 34;
pub const MUL: usize = 35;
/// Number of ids in use; model vocabularies must be at least this large.
pub const USED: usize = 36;

const VARS: [&str; 4] = ["a", "b", "c", "d"];

pub fn name(id: usize) -> Option<String> {
    Some(match id {
        SEP => "SEP".into(),
        END => "END".into(),
        i if (DIGIT..DIGIT + 10).contains(&i) => (i - DIGIT).to_string(),
        i if (VAR..VAR + 4).contains(&i) => VARS[i - VAR].into(),
        PLUS => "+".into(),
        MINUS => "-".into(),
        TIMES => "*".into(),
        i if (PUSH..PUSH + 10).contains(&i) => format!("PUSH_{}", i - PUSH),
        i if (LOAD..LOAD + 4).contains(&i) => format!("VAR_{}", VARS[i - LOAD]),
        ADD => "ADD".into(),
        SUB => "SUB".into(),
        MUL => "MUL".into(),
        _ => return None,
    })
}

pub fn parse(name: &str) -> Option<usize> {
    (0..USED).find(|&id| self::name(id).as_deref() == Some(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_are_unique() {
        let names: Vec<String> = (0..USED).map(|i| name(i).unwrap()).collect();
        for (i, n) in names.iter().enumerate() {
            assert_eq!(parse(n), Some(i));
        }
        assert!(name(USED).is_none());
        assert_eq!(name(PUSH + 3).unwrap(), "PUSH_3");
        assert_eq!(name(LOAD + 1).unwrap(), "VAR_b");
    }
}
