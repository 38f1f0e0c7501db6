//! Separates `--key=value` config overrides from the regular arguments.

use adtg::config::RunConfig;

/// Flags that clap handles even though they name config fields.
const COMMON: [&str; 2] = ["corpus", "out"];

/// Returns `(clap arguments, overrides)`. An argument is an override when it
/// has the form `--key=value` and the first segment of `key` is a config field.
pub fn split(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let fields = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let fields = fields.as_object().expect("object");
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        let key = a
            .strip_prefix("--")
            .and_then(|kv| kv.split_once('='))
            .map(|(k, _)| k.split('.').next().unwrap_or(k));
        match key {
            Some(head) if fields.contains_key(head) && !COMMON.contains(&head) => {
                overrides.push(a[2..].to_string());
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_become_overrides() {
        let args = ["adtg", "--guidance.beam_width=3", "train", "--stage", "all", "--seeds=[1,2]", "--out=x", "--force"];
        let (rest, ov) = split(args.iter().map(|s| s.to_string()).collect());
        assert_eq!(rest, ["adtg", "train", "--stage", "all", "--out=x", "--force"]);
        assert_eq!(ov, ["guidance.beam_width=3", "seeds=[1,2]"]);
    }
}
