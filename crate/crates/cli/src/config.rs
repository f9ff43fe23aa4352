use std::ffi::OsString;
use std::path::Path;

use clap::{CommandFactory, Parser};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::args::Cli;
use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

const GLOBAL_KEYS: [&str; 3] = ["seed", "threads", "out_dir"];
// keys that never change a number in the output
const UNHASHED_KEYS: [&str; 2] = ["threads", "out_dir"];

/// Parse flags, splicing in the experiment file named by `--config` if any.
pub fn parse_args<I, T>(argv: I) -> Result<Cli, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let Some(path) = config_path(&argv) else {
        let cli = Cli::try_parse_from(&argv)?;
        return match cli.command {
            Some(_) => Ok(cli),
            None => Err(CliError::Usage("a subcommand or --config is required".into())),
        };
    };
    let table = read_config(&path)?;
    let (command, mut spliced) = config_tokens(&table)?;

    // flags on the command line come after the file's so they win
    let mut rest = Vec::new();
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        let s = tok.to_string_lossy();
        if s == "--config" {
            it.next();
        } else if s.starts_with("--config=") {
        } else if !s.starts_with('-') && Cli::command().find_subcommand(s.as_ref()).is_some() {
            if s != command {
                return Err(CliError::Usage(format!("subcommand `{s}` conflicts with command = \"{command}\" in the config")));
            }
        } else {
            rest.push(tok.clone());
        }
    }
    let given: Vec<String> = rest.iter().filter_map(|t| flag_name(&t.to_string_lossy())).collect();
    spliced.retain(|t| flag_name(&t.to_string_lossy()).map_or(true, |f| !given.contains(&f)));
    let mut full: Vec<OsString> = vec![argv.first().cloned().unwrap_or_else(|| "heatlab".into()), command.into()];
    full.append(&mut spliced);
    full.append(&mut rest);
    let mut cli = Cli::try_parse_from(full)?;
    cli.global.config = Some(path);
    Ok(cli)
}

fn flag_name(tok: &str) -> Option<String> {
    tok.strip_prefix("--").map(|f| f.split('=').next().unwrap_or(f).to_string())
}

fn config_path(argv: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = argv.iter().skip(1).map(|t| t.to_string_lossy());
    while let Some(tok) = it.next() {
        if tok == "--config" {
            return it.next().map(|p| p.as_ref().into());
        }
        if let Some(p) = tok.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

pub fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        Some("toml") => toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        _ => return Err(CliError::Usage(format!("{}: config must end in .toml or .json", path.display()))),
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage("config must be a table".into())),
    }
}

/// Subcommand name and `--key=value` tokens for a config table; rejects unknown keys.
pub fn config_tokens(table: &Map<String, Value>) -> Result<(String, Vec<OsString>), CliError> {
    match table.get("schema").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(CliError::Usage(format!("unsupported schema {v}, expected {SCHEMA_VERSION}"))),
        None => return Err(CliError::Usage(format!("config needs schema = {SCHEMA_VERSION}"))),
    }
    let command = match table.get("command") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(CliError::Usage("config needs a command key".into())),
    };
    let root = Cli::command();
    let sub = root
        .find_subcommand(&command)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{command}`")))?;
    let known: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long()).map(|l| l.replace('-', "_")).collect();

    let mut tokens = Vec::new();
    for (key, value) in table {
        if key == "schema" || key == "command" {
            continue;
        }
        if !GLOBAL_KEYS.contains(&key.as_str()) && !known.contains(key) {
            return Err(CliError::Usage(format!("unknown config key `{key}` for `{command}`")));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => tokens.push(flag.into()),
            Value::Array(items) if items.is_empty() => {}
            Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar_text).collect::<Result<_, _>>()?;
                tokens.push(format!("{flag}={}", joined.join(",")).into());
            }
            other => tokens.push(format!("{flag}={}", scalar_text(other)?).into()),
        }
    }
    Ok((command, tokens))
}

fn scalar_text(v: &Value) -> Result<String, CliError> {
    match v {
        Value::Number(n) => Ok(n.to_string()),
        Value::String(s) => Ok(s.clone()),
        other => Err(CliError::Usage(format!("unsupported config value {other}"))),
    }
}

/// The resolved experiment as a flat table: schema, command, globals, then every parameter.
pub fn config_table(cli: &Cli) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema".into(), SCHEMA_VERSION.into());
    if let Some(cmd) = &cli.command {
        m.insert("command".into(), cmd.name().into());
        if let Value::Object(args) = cmd.to_value() {
            m.extend(args.into_iter().filter(|(_, v)| !v.is_null()));
        }
    }
    if let Value::Object(g) = serde_json::to_value(&cli.global).expect("globals serialize") {
        m.extend(g.into_iter().filter(|(_, v)| !v.is_null()));
    }
    m
}

pub fn to_toml(table: &Map<String, Value>) -> String {
    toml::to_string(table).expect("flat tables are valid TOML")
}

/// SHA-256 over the canonical JSON of every parameter that affects the numbers.
pub fn config_hash(cli: &Cli) -> String {
    let mut table = config_table(cli);
    for k in UNHASHED_KEYS {
        table.remove(k);
    }
    let digest = Sha256::digest(serde_json::to_vec(&table).expect("table serializes"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
