//! Client for an out-of-process bridge speaking newline-delimited JSON over
//! stdio. Images travel as files inside a shared workspace directory.

use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};

use super::{
    DepthEstimator, EditRequest, Editor, NoisePredictor, NoiseRequest, NoiseSchedule, Perceptual,
};
use crate::error::OracleError;
use crate::image::{
    read_npy, read_pfm_rgb, read_pfm_scalar, read_png_rgb, write_pfm_rgb, write_png_rgb, RgbImage,
    ScalarImage, Tensor3,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

pub struct BridgeClient {
    session: Mutex<Session>,
    workspace: PathBuf,
    timeout: Duration,
    next_id: AtomicU64,
    handshake: Mutex<Option<Value>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("workspace", &self.workspace)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl BridgeClient {
    /// Spawns `sh -c cmd` with `workspace` as its working directory.
    pub fn spawn(cmd: &str, workspace: impl Into<PathBuf>, timeout: Duration) -> Result<Self, OracleError> {
        let workspace = workspace.into();
        std::fs::create_dir_all(&workspace)
            .map_err(|e| OracleError::Unavailable(format!("{}: {e}", workspace.display())))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .current_dir(&workspace)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::Unavailable(format!("spawning '{cmd}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            session: Mutex::new(Session {
                child,
                stdin,
                lines: rx,
            }),
            workspace,
            timeout,
            next_id: AtomicU64::new(0),
            handshake: Mutex::new(None),
        })
    }

    pub fn workspace(&self) -> &Path {
        &self.workspace
    }

    /// Last hello message seen from the bridge, if any.
    pub fn handshake(&self) -> Option<Value> {
        self.handshake.lock().expect("handshake lock").clone()
    }

    /// Noise schedule reported by the handshake, or the default linear one.
    pub fn schedule(&self) -> NoiseSchedule {
        self.handshake()
            .and_then(|h| serde_json::from_value::<Vec<f64>>(h.get("alpha_bars")?.clone()).ok())
            .and_then(|t| NoiseSchedule::from_alpha_bars(&t).ok())
            .unwrap_or_default()
    }

    /// Health check: the bridge must return the payload unchanged.
    pub fn echo(&self, payload: &Value) -> Result<(), OracleError> {
        let out = self.call("echo", Map::new(), json!({ "payload": payload }))?;
        match out.get("payload") {
            Some(p) if p == payload => Ok(()),
            other => Err(OracleError::Protocol(format!("echo returned {other:?}"))),
        }
    }

    /// Fresh request directory inside the workspace, returned workspace-relative.
    fn scratch(&self, id: u64) -> Result<PathBuf, OracleError> {
        let rel = PathBuf::from(format!("req-{id:06}"));
        std::fs::create_dir_all(self.workspace.join(&rel))
            .map_err(|e| OracleError::Bridge(format!("creating request dir: {e}")))?;
        Ok(rel)
    }

    /// Sends one request and waits for its response, returning `outputs`.
    pub fn call(&self, kind: &str, inputs: Map<String, Value>, params: Value) -> Result<Map<String, Value>, OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        self.call_with_id(id, kind, inputs, params)
    }

    fn call_with_id(
        &self,
        id: u64,
        kind: &str,
        inputs: Map<String, Value>,
        params: Value,
    ) -> Result<Map<String, Value>, OracleError> {
        let mut session = self.session.lock().expect("bridge session lock");
        let req = json!({ "id": id, "kind": kind, "inputs": inputs, "params": params });
        writeln!(session.stdin, "{req}")
            .and_then(|_| session.stdin.flush())
            .map_err(|e| OracleError::Unavailable(format!("writing request: {e}")))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match session.lines.recv_timeout(left) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(OracleError::Unavailable(format!("reading response: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(OracleError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    let status = session.child.try_wait().ok().flatten();
                    return Err(OracleError::Unavailable(format!("bridge exited ({status:?})")));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let msg: Value = serde_json::from_str(&line)
                .map_err(|e| OracleError::Protocol(format!("malformed response: {e}")))?;
            if msg.get("kind").and_then(Value::as_str) == Some("hello") {
                *self.handshake.lock().expect("handshake lock") = Some(msg);
                continue;
            }
            match msg.get("id").and_then(Value::as_u64) {
                Some(got) if got == id => {}
                // Late answer to a request that already timed out.
                Some(got) if got < id => continue,
                other => return Err(OracleError::Protocol(format!("response id {other:?}, expected {id}"))),
            }
            return match msg.get("ok").and_then(Value::as_bool) {
                Some(true) => match msg.get("outputs") {
                    Some(Value::Object(o)) => Ok(o.clone()),
                    None => Ok(Map::new()),
                    Some(_) => Err(OracleError::Protocol("outputs is not an object".into())),
                },
                Some(false) => Err(OracleError::Bridge(
                    msg.get("error")
                        .and_then(Value::as_str)
                        .unwrap_or("unspecified bridge error")
                        .to_string(),
                )),
                None => Err(OracleError::Protocol("response lacks 'ok'".into())),
            };
        }
    }

    /// Resolves a workspace-relative output path, rejecting escapes.
    pub fn resolve(&self, outputs: &Map<String, Value>, key: &str) -> Result<PathBuf, OracleError> {
        let rel = outputs
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| OracleError::Protocol(format!("missing output '{key}'")))?;
        let p = Path::new(rel);
        if p.is_absolute() || p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(OracleError::Protocol(format!("output path '{rel}' leaves the workspace")));
        }
        Ok(self.workspace.join(p))
    }

    fn write_input(&self, rel: &Path, f: impl FnOnce(&Path) -> crate::Result<()>) -> Result<Value, OracleError> {
        f(&self.workspace.join(rel)).map_err(|e| OracleError::Bridge(format!("writing input: {e}")))?;
        Ok(Value::String(rel.to_string_lossy().into_owned()))
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Ok(s) = self.session.get_mut() {
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }
}

fn read_output<T>(r: crate::Result<T>) -> Result<T, OracleError> {
    r.map_err(|e| OracleError::Protocol(format!("reading bridge output: {e}")))
}

fn check_size(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<(), OracleError> {
    if got != want {
        return Err(OracleError::Protocol(format!(
            "{what} is {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

impl Editor for BridgeClient {
    fn edit(&self, req: &EditRequest<'_>) -> Result<RgbImage, OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let dir = self.scratch(id)?;
        let mut inputs = Map::new();
        inputs.insert("source".into(), self.write_input(&dir.join("source.png"), |p| write_png_rgb(req.source, p))?);
        inputs.insert("coarse".into(), self.write_input(&dir.join("coarse.png"), |p| write_png_rgb(req.coarse, p))?);
        let params = json!({
            "prompt": req.prompt, "t": req.start_t, "w": req.guidance, "seed": req.seed,
            "view": req.view, "out": dir.join("edited.png"),
        });
        let out = self.call_with_id(id, "edit", inputs, params)?;
        let img = read_output(read_png_rgb(self.resolve(&out, "image")?))?;
        check_size("edited image", (img.width, img.height), (req.coarse.width, req.coarse.height))?;
        Ok(img)
    }
}

impl NoisePredictor for BridgeClient {
    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Tensor3, OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let dir = self.scratch(id)?;
        let mut inputs = Map::new();
        inputs.insert("image".into(), self.write_input(&dir.join("image.png"), |p| write_png_rgb(req.image, p))?);
        let params = json!({
            "prompt": req.prompt, "tau": req.tau, "seed": req.seed,
            "view": req.view, "out": dir.join("noise.npy"),
        });
        let out = self.call_with_id(id, "predict_noise", inputs, params)?;
        read_output(read_npy(self.resolve(&out, "noise")?))
    }
}

impl DepthEstimator for BridgeClient {
    fn disparity(&self, view: usize, image: &RgbImage) -> Result<ScalarImage, OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let dir = self.scratch(id)?;
        let mut inputs = Map::new();
        inputs.insert("image".into(), self.write_input(&dir.join("image.png"), |p| write_png_rgb(image, p))?);
        let params = json!({ "view": view, "out": dir.join("disparity.pfm") });
        let out = self.call_with_id(id, "disparity", inputs, params)?;
        let d = read_output(read_pfm_scalar(self.resolve(&out, "disparity")?))?;
        check_size("disparity", (d.width, d.height), (image.width, image.height))?;
        Ok(d)
    }
}

impl Perceptual for BridgeClient {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage), OracleError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let dir = self.scratch(id)?;
        let mut inputs = Map::new();
        inputs.insert("a".into(), self.write_input(&dir.join("a.pfm"), |p| write_pfm_rgb(a, p))?);
        inputs.insert("b".into(), self.write_input(&dir.join("b.pfm"), |p| write_pfm_rgb(b, p))?);
        let params = json!({ "out": dir.join("grad.pfm") });
        let out = self.call_with_id(id, "perceptual", inputs, params)?;
        let value = out
            .get("value")
            .and_then(Value::as_f64)
            .ok_or_else(|| OracleError::Protocol("missing output 'value'".into()))?;
        let grad = read_output(read_pfm_rgb(self.resolve(&out, "grad")?))?;
        check_size("perceptual gradient", (grad.width, grad.height), (a.width, a.height))?;
        Ok((value, grad))
    }
}
