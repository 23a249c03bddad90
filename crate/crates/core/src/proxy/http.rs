//! Minimal HTTP/1.1: GET, status lines, headers, Content-Length bodies.
//! One request per connection.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use url::Url;

const MAX_HEAD: usize = 64 * 1024;
pub const MAX_BODY: usize = 16 << 20;
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("bad url {0}")]
    BadUrl(String),
    #[error("connect to {0} failed: {1}")]
    Connect(String, String),
}

pub type Headers = Vec<(String, String)>;

fn find_header<'a>(headers: &'a Headers, name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub target: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Request {
    pub fn get(target: &str) -> Self {
        Self {
            method: "GET".into(),
            target: target.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let mut head = format!("{} {} HTTP/1.1\r\n", self.method, self.target);
        for (k, v) in &self.headers {
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        if find_header(&self.headers, "connection").is_none() {
            head.push_str("Connection: close\r\n");
        }
        if !self.body.is_empty() {
            head.push_str(&format!("Content-Length: {}\r\n", self.body.len()));
        }
        head.push_str("\r\n");
        w.write_all(head.as_bytes())?;
        w.write_all(&self.body)?;
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub reason: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: u16, content_type: &str, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            reason: reason_phrase(status).into(),
            headers: vec![("Content-Type".into(), content_type.into())],
            body: body.into(),
        }
    }

    pub fn text(status: u16, body: &str) -> Self {
        Self::new(status, "text/plain", body.as_bytes().to_vec())
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn set_header(&mut self, name: &str, value: &str) {
        self.headers.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
        self.headers.push((name.into(), value.into()));
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let mut head = format!("HTTP/1.1 {} {}\r\n", self.status, self.reason);
        for (k, v) in &self.headers {
            if k.eq_ignore_ascii_case("content-length")
                || k.eq_ignore_ascii_case("connection")
                || k.eq_ignore_ascii_case("transfer-encoding")
            {
                continue;
            }
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        head.push_str(&format!(
            "Content-Length: {}\r\nConnection: close\r\n\r\n",
            self.body.len()
        ));
        w.write_all(head.as_bytes())?;
        w.write_all(&self.body)?;
        w.flush()
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        _ => "Status",
    }
}

fn read_head(r: &mut impl BufRead) -> Result<Option<Vec<String>>, HttpError> {
    let mut lines = Vec::new();
    let mut total = 0;
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            if lines.is_empty() {
                return Ok(None);
            }
            return Err(HttpError::Malformed("eof in header".into()));
        }
        total += n;
        if total > MAX_HEAD {
            return Err(HttpError::Malformed("header too large".into()));
        }
        let line = line.trim_end_matches(['\r', '\n']).to_string();
        if line.is_empty() {
            if lines.is_empty() {
                continue;
            }
            return Ok(Some(lines));
        }
        lines.push(line);
    }
}

fn parse_headers(lines: &[String]) -> Result<Headers, HttpError> {
    lines
        .iter()
        .map(|l| {
            let (k, v) = l
                .split_once(':')
                .ok_or_else(|| HttpError::Malformed(format!("header line {l:?}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn read_body(r: &mut impl BufRead, headers: &Headers, until_eof: bool) -> Result<Vec<u8>, HttpError> {
    if let Some(len) = find_header(headers, "content-length") {
        let len: usize = len
            .parse()
            .map_err(|_| HttpError::Malformed(format!("content-length {len:?}")))?;
        if len > MAX_BODY {
            return Err(HttpError::Malformed("body too large".into()));
        }
        let mut body = vec![0; len];
        r.read_exact(&mut body)?;
        return Ok(body);
    }
    let mut body = Vec::new();
    if until_eof {
        r.take(MAX_BODY as u64 + 1).read_to_end(&mut body)?;
        if body.len() > MAX_BODY {
            return Err(HttpError::Malformed("body too large".into()));
        }
    }
    Ok(body)
}

pub fn read_request(r: &mut impl BufRead) -> Result<Option<Request>, HttpError> {
    let Some(lines) = read_head(r)? else {
        return Ok(None);
    };
    let mut parts = lines[0].split_whitespace();
    let (Some(method), Some(target), Some(version)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(HttpError::Malformed(format!("request line {:?}", lines[0])));
    };
    if !version.starts_with("HTTP/1.") {
        return Err(HttpError::Malformed(format!("version {version}")));
    }
    let headers = parse_headers(&lines[1..])?;
    let body = read_body(r, &headers, false)?;
    Ok(Some(Request {
        method: method.into(),
        target: target.into(),
        headers,
        body,
    }))
}

pub fn read_response(r: &mut impl BufRead) -> Result<Response, HttpError> {
    let lines = read_head(r)?.ok_or_else(|| HttpError::Malformed("empty response".into()))?;
    let mut parts = lines[0].splitn(3, ' ');
    let version = parts.next().unwrap_or_default();
    if !version.starts_with("HTTP/1.") {
        return Err(HttpError::Malformed(format!("status line {:?}", lines[0])));
    }
    let status: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HttpError::Malformed(format!("status line {:?}", lines[0])))?;
    let reason = parts.next().unwrap_or("").to_string();
    let headers = parse_headers(&lines[1..])?;
    let body = read_body(r, &headers, true)?;
    Ok(Response {
        status,
        reason,
        headers,
        body,
    })
}

fn dial(addr: &str) -> Result<TcpStream, HttpError> {
    let sock = addr
        .to_socket_addrs()
        .map_err(|e| HttpError::Connect(addr.into(), e.to_string()))?
        .next()
        .ok_or_else(|| HttpError::Connect(addr.into(), "no address".into()))?;
    let s =
        TcpStream::connect_timeout(&sock, IO_TIMEOUT).map_err(|e| HttpError::Connect(addr.into(), e.to_string()))?;
    s.set_read_timeout(Some(IO_TIMEOUT))?;
    s.set_write_timeout(Some(IO_TIMEOUT))?;
    Ok(s)
}

/// Send `req` to `addr` and read the response.
pub fn exchange(addr: &str, req: &Request) -> Result<Response, HttpError> {
    let mut s = dial(addr)?;
    req.write_to(&mut s)?;
    read_response(&mut BufReader::new(s))
}

/// `host:port` of an http URL.
pub fn authority(url: &Url) -> Result<String, HttpError> {
    let host = url.host_str().ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
    let port = url.port_or_known_default().unwrap_or(80);
    Ok(format!("{host}:{port}"))
}

/// GET `url`, directly or through an HTTP proxy.
pub fn get(url: &str, proxy: Option<&str>, extra: &[(&str, &str)]) -> Result<Response, HttpError> {
    let parsed = Url::parse(url).map_err(|_| HttpError::BadUrl(url.into()))?;
    if parsed.scheme() != "http" {
        return Err(HttpError::BadUrl(url.into()));
    }
    let host = authority(&parsed)?;
    let (addr, target) = match proxy {
        Some(p) => (p.to_string(), parsed.to_string()),
        None => {
            let mut t = parsed.path().to_string();
            if let Some(q) = parsed.query() {
                t.push('?');
                t.push_str(q);
            }
            (host.clone(), t)
        }
    };
    let mut req = Request::get(&target).with_header("Host", &host);
    for (k, v) in extra {
        req = req.with_header(k, v);
    }
    exchange(&addr, &req)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let req = Request::get("http://origin:8/x.html").with_header("Host", "origin:8");
        let mut buf = Vec::new();
        req.write_to(&mut buf).unwrap();
        let back = read_request(&mut &buf[..]).unwrap().unwrap();
        assert_eq!(back.target, "http://origin:8/x.html");
        assert_eq!(back.header("host"), Some("origin:8"));
    }

    #[test]
    fn response_round_trip() {
        let r = Response::new(404, "text/plain", b"nope".to_vec());
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        let back = read_response(&mut &buf[..]).unwrap();
        assert_eq!((back.status, back.body.as_slice()), (404, &b"nope"[..]));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(read_request(&mut &b"hello\r\n\r\n"[..]).is_err());
    }
}
