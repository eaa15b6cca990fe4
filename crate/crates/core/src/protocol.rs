//! Newline-delimited JSON protocol for external model adapters.
//!
//! Every message is one [`AdapterEnvelope`] on its own line. Requests carry a
//! fresh `request_id`; the response echoes it. A failed request is answered
//! with `op = "error"` and a `message` param. Tensors travel as little-endian
//! `f32` bytes in base64.
//!
//! Ops: `handshake`, `encode_image`, `eval_structure_field`,
//! `eval_latent_field`, `estimate_depth`, `detect_landmarks`, `decode_object`.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::flow::{Condition, FieldError, FlowField, FlowTensor, Stage};
use crate::prior::Intrinsics;
use crate::tiler::CropRect;

pub const TENSOR_ENCODING: &str = "f32le-b64";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter did not answer within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("adapter reported: {0}")]
    RemoteError(String),
    #[error("adapter i/o: {0}")]
    Io(#[from] io::Error),
}

fn protocol(msg: impl Into<String>) -> AdapterError {
    AdapterError::ProtocolError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPayload {
    pub name: String,
    pub shape: Vec<usize>,
    pub encoding: String,
    pub data: String,
}

impl TensorPayload {
    pub fn encode(name: &str, tensor: &FlowTensor) -> Self {
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            encoding: TENSOR_ENCODING.to_string(),
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<FlowTensor, AdapterError> {
        if self.encoding != TENSOR_ENCODING {
            return Err(protocol(format!(
                "tensor '{}' has encoding '{}'",
                self.name, self.encoding
            )));
        }
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| protocol(format!("tensor '{}': {e}", self.name)))?;
        let expected = self
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(bytes.len()) {
            return Err(protocol(format!(
                "tensor '{}' declares shape {:?} but carries {} bytes",
                self.name,
                self.shape,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FlowTensor::new(self.shape.clone(), values)
            .map_err(|e| protocol(format!("tensor '{}': {e}", self.name)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterEnvelope {
    pub op: String,
    #[serde(default)]
    pub request_id: String,
    #[serde(default)]
    pub tensors: Vec<TensorPayload>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl AdapterEnvelope {
    pub fn new(op: &str) -> Self {
        Self {
            op: op.to_string(),
            ..Default::default()
        }
    }

    pub fn error(request_id: &str, message: &str) -> Self {
        Self::new("error")
            .param("message", message)
            .with_id(request_id)
    }

    pub fn with_id(mut self, request_id: &str) -> Self {
        self.request_id = request_id.to_string();
        self
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn tensor(mut self, name: &str, tensor: &FlowTensor) -> Self {
        self.tensors.push(TensorPayload::encode(name, tensor));
        self
    }

    pub fn get_tensor(&self, name: &str) -> Result<FlowTensor, AdapterError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| protocol(format!("'{}' message lacks tensor '{name}'", self.op)))?
            .decode()
    }

    fn get(&self, key: &str) -> Result<&Value, AdapterError> {
        self.params
            .get(key)
            .ok_or_else(|| protocol(format!("'{}' message lacks param '{key}'", self.op)))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, AdapterError> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| protocol(format!("param '{key}' is not a number")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, AdapterError> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| protocol(format!("param '{key}' is not a non-negative integer")))
    }

    pub fn get_str(&self, key: &str) -> Result<&str, AdapterError> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| protocol(format!("param '{key}' is not a string")))
    }

    /// Checks that params are scalars and every tensor decodes to its shape.
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.op.is_empty() {
            return Err(protocol("empty op"));
        }
        if let Some((k, _)) = self
            .params
            .iter()
            .find(|(_, v)| v.is_array() || v.is_object())
        {
            return Err(protocol(format!("param '{k}' is not a scalar")));
        }
        for t in &self.tensors {
            t.decode()?;
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("envelope serializes");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Self, AdapterError> {
        let env: Self = serde_json::from_str(line.trim_end())
            .map_err(|e| protocol(format!("bad envelope: {e}")))?;
        env.validate()?;
        Ok(env)
    }
}

/// Where an adapter lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterEndpoint {
    /// Spawned process speaking the protocol on stdin/stdout.
    Command(Vec<String>),
    /// `host:port` of a listening adapter.
    Tcp(String),
}

/// Values the adapter reports at handshake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub sigma_min: f64,
    pub channels: usize,
    pub resolution: u32,
}

/// Synchronous client with one request in flight at a time.
pub struct AdapterClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    timeout: Duration,
    next_id: u64,
    abandoned: HashSet<String>,
}

impl std::fmt::Debug for AdapterClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterClient")
            .field("timeout", &self.timeout)
            .field("next_id", &self.next_id)
            .finish_non_exhaustive()
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            let msg = match reader.read_line(&mut line) {
                Ok(0) => Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "adapter closed the stream",
                )),
                Ok(_) => Ok(line),
                Err(e) => Err(e),
            };
            let stop = msg.is_err();
            if tx.send(msg).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl AdapterClient {
    pub fn connect(endpoint: &AdapterEndpoint, timeout: Duration) -> Result<Self, AdapterError> {
        match endpoint {
            AdapterEndpoint::Command(argv) => {
                let (prog, args) = argv
                    .split_first()
                    .ok_or_else(|| protocol("empty adapter command"))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self::from_parts(
                    Box::new(stdin),
                    spawn_reader(stdout),
                    Some(child),
                    timeout,
                ))
            }
            AdapterEndpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                Ok(Self::from_parts(
                    Box::new(stream),
                    spawn_reader(reader),
                    None,
                    timeout,
                ))
            }
        }
    }

    fn from_parts(
        writer: Box<dyn Write + Send>,
        lines: Receiver<io::Result<String>>,
        child: Option<Child>,
        timeout: Duration,
    ) -> Self {
        Self {
            writer,
            lines,
            child,
            timeout,
            next_id: 0,
            abandoned: HashSet::new(),
        }
    }

    /// Client over an arbitrary byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: io::Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::from_parts(Box::new(writer), spawn_reader(reader), None, timeout)
    }

    /// Sends `request` under a fresh id and waits for the matching response.
    pub fn call(&mut self, mut request: AdapterEnvelope) -> Result<AdapterEnvelope, AdapterError> {
        self.next_id += 1;
        request.request_id = format!("r{}", self.next_id);
        request.validate()?;
        self.writer.write_all(request.to_line().as_bytes())?;
        self.writer.flush()?;
        loop {
            let line = match self.lines.recv_timeout(self.timeout) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => {
                    self.abandoned.insert(request.request_id.clone());
                    return Err(AdapterError::Timeout(self.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(protocol("adapter reader stopped"));
                }
            };
            let response = AdapterEnvelope::from_line(&line)?;
            if response.request_id != request.request_id {
                // late answer to a request that already timed out
                if self.abandoned.remove(&response.request_id) {
                    continue;
                }
                return Err(protocol(format!(
                    "response id '{}' does not match request '{}'",
                    response.request_id, request.request_id
                )));
            }
            if response.op == "error" {
                let msg = response.get_str("message").unwrap_or("unspecified error");
                return Err(AdapterError::RemoteError(msg.to_string()));
            }
            return Ok(response);
        }
    }

    pub fn handshake(&mut self) -> Result<Handshake, AdapterError> {
        let r = self.call(AdapterEnvelope::new("handshake"))?;
        Ok(Handshake {
            sigma_min: r.get_f64("sigma_min")?,
            channels: r.get_u64("channels")? as usize,
            resolution: r.get_u64("resolution")? as u32,
        })
    }

    /// Encodes an image crop and returns the adapter's condition handle.
    pub fn encode_image(&mut self, image: &str, crop: CropRect) -> Result<String, AdapterError> {
        let r = self.call(crop_params(
            AdapterEnvelope::new("encode_image").param("image", image),
            crop,
        ))?;
        Ok(r.get_str("condition_id")?.to_string())
    }

    pub fn eval_field(
        &mut self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, AdapterError> {
        let request = field_request(x, t, condition);
        let response = self.call(request)?;
        response.get_tensor("v")
    }

    /// Depth map `[H, W]` with the camera the adapter assumed.
    pub fn estimate_depth(
        &mut self,
        image: &str,
    ) -> Result<(FlowTensor, Intrinsics), AdapterError> {
        let r = self.call(AdapterEnvelope::new("estimate_depth").param("image", image))?;
        let depth = r.get_tensor("depth")?;
        if depth.shape().len() != 2 {
            return Err(protocol(format!("depth has shape {:?}", depth.shape())));
        }
        let k = Intrinsics {
            fx: r.get_f64("fx")?,
            fy: r.get_f64("fy")?,
            cx: r.get_f64("cx")?,
            cy: r.get_f64("cy")?,
        };
        Ok((depth, k))
    }

    /// Per-pixel landmark ids `[H, W]`, `-1` for background.
    pub fn detect_landmarks(&mut self, image: &str) -> Result<FlowTensor, AdapterError> {
        let r = self.call(AdapterEnvelope::new("detect_landmarks").param("image", image))?;
        let labels = r.get_tensor("labels")?;
        if labels.shape().len() != 2 {
            return Err(protocol(format!("labels have shape {:?}", labels.shape())));
        }
        Ok(labels)
    }

    /// Surface samples of the object generated for one landmark.
    pub fn decode_object(
        &mut self,
        image: &str,
        landmark: u32,
    ) -> Result<Vec<Vector3<f64>>, AdapterError> {
        let r = self.call(
            AdapterEnvelope::new("decode_object")
                .param("image", image)
                .param("landmark_id", landmark),
        )?;
        let pts = r.get_tensor("points")?;
        if pts.shape().len() != 2 || pts.shape()[1] != 3 {
            return Err(protocol(format!("points have shape {:?}", pts.shape())));
        }
        Ok(pts
            .values()
            .chunks_exact(3)
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect())
    }
}

impl Drop for AdapterClient {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn crop_params(env: AdapterEnvelope, crop: CropRect) -> AdapterEnvelope {
    env.param("crop_u0", crop.u0)
        .param("crop_v0", crop.v0)
        .param("crop_w", crop.w)
        .param("crop_h", crop.h)
}

fn field_op(stage: Stage) -> &'static str {
    match stage {
        Stage::Structure => "eval_structure_field",
        Stage::Latent => "eval_latent_field",
    }
}

/// Builds the request for one field evaluation.
pub fn field_request(x: &FlowTensor, t: f64, c: &Condition) -> AdapterEnvelope {
    let mut env = AdapterEnvelope::new(field_op(c.stage))
        .tensor("x", x)
        .param("t", t)
        .param("guidance", c.guidance as f64);
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        env = env
            .param(&format!("origin_{axis}"), c.origin[i])
            .param(&format!("shape_{axis}"), c.region_shape[i]);
    }
    if let Some(crop) = c.crop {
        env = crop_params(env, crop);
    }
    if let Some(id) = &c.condition_id {
        env = env.param("condition_id", id.as_str());
    }
    if c.stage == Stage::Latent {
        let pos: Vec<f32> = c
            .rows
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
            .collect();
        let pos = FlowTensor::new(vec![c.rows.len(), 3], pos).expect("row positions");
        env = env.tensor("positions", &pos);
    }
    env
}

/// Inverse of [`field_request`]: the state, time and condition it carries.
pub fn parse_field_request(
    env: &AdapterEnvelope,
) -> Result<(FlowTensor, f64, Condition), AdapterError> {
    let stage = match env.op.as_str() {
        "eval_structure_field" => Stage::Structure,
        "eval_latent_field" => Stage::Latent,
        other => return Err(protocol(format!("'{other}' is not a field op"))),
    };
    let x = env.get_tensor("x")?;
    let t = env.get_f64("t")?;
    let u32_param = |k: &str| env.get_u64(k).map(|v| v as u32);
    let mut c = Condition {
        stage,
        guidance: env.get_f64("guidance")? as f32,
        origin: [
            u32_param("origin_x")?,
            u32_param("origin_y")?,
            u32_param("origin_z")?,
        ],
        region_shape: [
            u32_param("shape_x")?,
            u32_param("shape_y")?,
            u32_param("shape_z")?,
        ],
        ..Default::default()
    };
    if env.params.contains_key("crop_u0") {
        c.crop = Some(CropRect {
            u0: u32_param("crop_u0")?,
            v0: u32_param("crop_v0")?,
            w: u32_param("crop_w")?,
            h: u32_param("crop_h")?,
        });
    }
    if env.params.contains_key("condition_id") {
        c.condition_id = Some(env.get_str("condition_id")?.to_string());
    }
    if stage == Stage::Latent {
        let pos = env.get_tensor("positions")?;
        if pos.shape() != [x.shape()[0], 3] {
            return Err(protocol(format!(
                "positions shape {:?} for x shape {:?}",
                pos.shape(),
                x.shape()
            )));
        }
        c.rows = pos
            .values()
            .chunks_exact(3)
            .map(|p| crate::latent::Voxel::new(p[0] as u32, p[1] as u32, p[2] as u32))
            .collect();
    }
    Ok((x, t, c))
}

/// Answers requests from `reader` with `handler` until the stream ends.
///
/// Handler errors are sent back as `error` envelopes; malformed lines get an
/// error envelope with an empty id.
pub fn serve<R, W, H>(reader: R, mut writer: W, mut handler: H) -> io::Result<()>
where
    R: BufRead,
    W: Write,
    H: FnMut(&AdapterEnvelope) -> Result<AdapterEnvelope, String>,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match AdapterEnvelope::from_line(&line) {
            Ok(req) => match handler(&req) {
                Ok(resp) => resp.with_id(&req.request_id),
                Err(msg) => AdapterEnvelope::error(&req.request_id, &msg),
            },
            Err(e) => AdapterEnvelope::error("", &e.to_string()),
        };
        writer.write_all(response.to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// A flow field answered by a remote adapter.
#[derive(Debug)]
pub struct AdapterField {
    client: Mutex<AdapterClient>,
}

impl AdapterField {
    pub fn new(client: AdapterClient) -> Self {
        Self {
            client: Mutex::new(client),
        }
    }

    pub fn client(&self) -> std::sync::MutexGuard<'_, AdapterClient> {
        self.client.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl FlowField for AdapterField {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, FieldError> {
        let v = self.client().eval_field(x, t, condition)?;
        if v.shape() != x.shape() {
            return Err(FieldError::ShapeClosure {
                expected: x.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Voxel;

    #[test]
    fn tensor_payload_round_trip() {
        let t = FlowTensor::new(
            vec![2, 3],
            vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
        )
        .unwrap();
        let p = TensorPayload::encode("x", &t);
        assert_eq!(p.encoding, "f32le-b64");
        let back = p.decode().unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.values().iter().zip(t.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_must_match_bytes() {
        let mut p = TensorPayload::encode("x", &FlowTensor::zeros(vec![4]));
        p.shape = vec![5];
        assert!(matches!(p.decode(), Err(AdapterError::ProtocolError(_))));
        p.shape = vec![usize::MAX, 2];
        assert!(p.decode().is_err());
    }

    #[test]
    fn params_must_be_scalars() {
        let env = AdapterEnvelope::new("handshake").param("bad", serde_json::json!([1, 2]));
        assert!(env.validate().is_err());
        assert!(AdapterEnvelope::from_line("{\"op\": \"x\", \"params\": {\"a\": {}}}").is_err());
        assert!(AdapterEnvelope::from_line("not json").is_err());
    }

    #[test]
    fn field_request_round_trip() {
        let x = FlowTensor::new(vec![2, 2], vec![0.5, 1.5, -2.0, 0.0]).unwrap();
        let c = Condition {
            stage: Stage::Latent,
            guidance: 5.0,
            origin: [64, 32, 0],
            region_shape: [64, 64, 64],
            crop: Some(CropRect {
                u0: 1,
                v0: 2,
                w: 3,
                h: 4,
            }),
            rows: vec![Voxel::new(1, 2, 3), Voxel::new(63, 0, 9)],
            condition_id: Some("img-7".into()),
        };
        let t = 0.1 + 0.2;
        let line = field_request(&x, t, &c).with_id("r1").to_line();
        let (x2, t2, c2) =
            parse_field_request(&AdapterEnvelope::from_line(&line).unwrap()).unwrap();
        assert_eq!(x2, x);
        assert_eq!(t2.to_bits(), t.to_bits());
        assert_eq!(c2, c);
    }
}
