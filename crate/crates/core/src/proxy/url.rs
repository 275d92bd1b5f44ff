use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UrlError {
    #[error("unparseable url {0:?}: {1}")]
    Bad(String, &'static str),
}

/// `root://host//store/...`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteUrl {
    pub host: String,
    pub path: String,
}

impl RemoteUrl {
    /// Returns `None` for plain local paths (no scheme).
    pub fn parse(url: &str) -> Result<Option<Self>, UrlError> {
        let Some((scheme, rest)) = url.split_once("://") else {
            return Ok(None);
        };
        if scheme != "root" {
            return Err(UrlError::Bad(url.to_owned(), "scheme must be root"));
        }
        let (host, path) = rest
            .split_once("//")
            .ok_or(UrlError::Bad(url.to_owned(), "expected // before the path"))?;
        if host.is_empty() || host.contains('/') {
            return Err(UrlError::Bad(url.to_owned(), "bad host"));
        }
        let path = format!("/{path}");
        if !path.starts_with("/store/") || path.len() <= "/store/".len() {
            return Err(UrlError::Bad(url.to_owned(), "path must start with /store/"));
        }
        Ok(Some(Self {
            host: host.to_owned(),
            path,
        }))
    }
}

impl std::fmt::Display for RemoteUrl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "root://{}/{}", self.host, self.path)
    }
}

/// Where an open request goes after the open-hook has looked at it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpenTarget {
    Local(String),
    Proxy { addr: String, path: String, token: String },
}

/// Points remote URLs at the proxy and attaches the data token; local paths
/// pass through untouched.
pub fn rewrite_url(url: &str, proxy_addr: &str, token: &str) -> Result<OpenTarget, UrlError> {
    Ok(match RemoteUrl::parse(url)? {
        None => OpenTarget::Local(url.to_owned()),
        Some(remote) => OpenTarget::Proxy {
            addr: proxy_addr.to_owned(),
            path: remote.path,
            token: token.to_owned(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewrite_examples() {
        assert_eq!(
            rewrite_url("root://aaa.example//store/ds1/f0.cacf", "proxy:9000", "tok").unwrap(),
            OpenTarget::Proxy {
                addr: "proxy:9000".into(),
                path: "/store/ds1/f0.cacf".into(),
                token: "tok".into()
            }
        );
        assert_eq!(
            rewrite_url("./f.cacf", "proxy:9000", "tok").unwrap(),
            OpenTarget::Local("./f.cacf".into())
        );
        assert!(rewrite_url("root://aaa.example/missing-double-slash", "p", "t").is_err());
        assert!(rewrite_url("root://aaa.example//etc/passwd", "p", "t").is_err());
        assert!(rewrite_url("http://x//store/a", "p", "t").is_err());
    }

    #[test]
    fn display_round_trips() {
        let u = RemoteUrl::parse("root://h.example//store/a/b.cacf").unwrap().unwrap();
        assert_eq!(u.to_string(), "root://h.example//store/a/b.cacf");
    }
}
