use serde_json::{Map, Value};

/// Parses `a.b.c=value`. The value is read as JSON when it parses, else
/// taken as a plain string.
pub fn parse(assignment: &str) -> Result<(Vec<String>, Value), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form key=value"))?;
    let keys: Vec<String> = path.split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(format!("override `{assignment}` has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

/// Sets `value` at `keys`, creating intermediate objects.
pub fn apply(root: &mut Value, keys: &[String], value: Value) -> Result<(), String> {
    let (last, parents) = keys.split_last().ok_or("empty override path")?;
    let mut node = root;
    for k in parents {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("cannot set `{}`: `{k}` is inside a non-object", keys.join(".")))?;
        node = obj.entry(k.clone()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| format!("cannot set `{}` on a non-object", keys.join(".")))?
        .insert(last.clone(), value);
    Ok(())
}
