//! Shared fixtures for the integration and acceptance suites.

use std::io::Write;
use std::path::Path;

/// Distinct, memorizable (code, summary) pairs. Summaries are unique per
/// pair and already in the normalized lowercase form the tokenizer round
/// trips.
pub fn synthetic_pairs(n: usize) -> Vec<(String, String)> {
    let verbs = ["get", "set", "add", "remove"];
    let nouns = ["index", "value", "node", "cache", "flag", "count", "limit", "name"];
    let ops = ["+", "-", "*", "%"];
    (0..n)
        .map(|i| {
            let v = verbs[i % verbs.len()];
            let o = nouns[(i / verbs.len()) % nouns.len()];
            let op = ops[i % ops.len()];
            (
                format!("int {v}_{o}(int a, int b) {{ {o} = a {op} b ; return {o} ; }}"),
                format!("{v} the {o} value"),
            )
        })
        .collect()
}

pub fn write_jsonl(path: &Path, pairs: &[(String, String)]) {
    let mut f = std::fs::File::create(path).unwrap();
    for (code, summary) in pairs {
        let line = serde_json::json!({ "code": code, "summary": summary });
        writeln!(f, "{line}").unwrap();
    }
}

/// A run configuration sized for fast end-to-end tests.
pub fn tiny_config_toml(
    train: &Path,
    out_dir: &Path,
    pretrain_steps: u64,
    finetune_steps: u64,
    seed: u64,
) -> String {
    format!(
        r#"seed = {seed}

[paths]
train = {train:?}
out_dir = {out:?}

[tokenizer]
vocab_size = 384

[model]
d_model = 32
n_layers = 2
n_heads = 2
d_ffn = 128
max_len = 128
dropout = 0.1

[pretrain]
batch_size = 8
steps = {pretrain_steps}
checkpoint_every = 0

[finetune]
batch_size = 8
steps = {finetune_steps}
validate_every = 0

[eval]
split = "train"
beam = 5
max_gen_len = 32
"#,
        train = train.display().to_string(),
        out = out_dir.display().to_string(),
    )
}
