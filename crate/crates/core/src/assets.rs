//! Static assets compiled into the daemon (default condition icons).

pub const STATIC_PREFIX: &str = "/static/";

pub struct BuiltinAsset {
    pub path: &'static str,
    pub content_type: &'static str,
    pub bytes: &'static [u8],
}

pub const BUILTIN_ASSETS: &[BuiltinAsset] = &[
    BuiltinAsset {
        path: "/static/icons/robot.svg",
        content_type: "image/svg+xml",
        bytes: include_bytes!("../assets/icons/robot.svg"),
    },
    BuiltinAsset {
        path: "/static/icons/person.svg",
        content_type: "image/svg+xml",
        bytes: include_bytes!("../assets/icons/person.svg"),
    },
    BuiltinAsset {
        path: "/static/icons/spark.svg",
        content_type: "image/svg+xml",
        bytes: include_bytes!("../assets/icons/spark.svg"),
    },
];

pub fn builtin(path: &str) -> Option<&'static BuiltinAsset> {
    BUILTIN_ASSETS.iter().find(|a| a.path == path)
}

/// Maps `/static/a/b.png` to `a/b.png`, rejecting anything that could escape
/// the asset directory.
pub fn static_relative_path(path: &str) -> Option<&str> {
    let rel = path.strip_prefix(STATIC_PREFIX)?;
    if rel.is_empty() || rel.len() > 256 {
        return None;
    }
    let ok_chars = rel
        .bytes()
        .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'/'));
    let ok_segments = rel
        .split('/')
        .all(|seg| !seg.is_empty() && seg != "." && seg != "..");
    (ok_chars && ok_segments).then_some(rel)
}

pub fn content_type_for(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or_default() {
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "js" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "html" => "text/html; charset=utf-8",
        _ => "application/octet-stream",
    }
}
