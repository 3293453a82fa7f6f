use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Instant, SystemTime};

use clickseg::data::{decode_mask, decode_rgb};
use clickseg::mask::reflect_pad_image;
use clickseg::metrics::iou;
use clickseg::{Click, ImageFeatures, Mask, Model};
use serde::Serialize;

use crate::latency::LatencyHistogram;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("bad image: {0}")]
    BadImage(String),

    #[error("image is {height}x{width}, above the limit of {limit} pixels")]
    TooLarge { height: usize, width: usize, limit: usize },

    #[error("click ({row}, {col}) is outside the {height}x{width} image")]
    ClickOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("no click to undo")]
    NothingToUndo,

    #[error(transparent)]
    Model(#[from] clickseg::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Live sessions kept; the least recently used one is evicted beyond this.
    pub max_sessions: usize,
    /// Largest accepted `height * width`.
    pub max_pixels: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: 16,
            max_pixels: 1024 * 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Size the image was reflect-padded to before encoding (a multiple of
    /// twice the patch size).
    pub padded_height: usize,
    pub padded_width: usize,
    pub token_grid: [usize; 2],
}

/// Result of a click or an undo; `mask` is at the original image size.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickOutcome {
    pub mask: Mask,
    pub clicks: usize,
    /// IoU against the reference mask attached at creation, if any.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Export {
    pub mask: Mask,
    pub clicks: Vec<Click>,
    pub created_at: SystemTime,
}

#[derive(Clone, Debug, Serialize)]
pub struct ServiceMetrics {
    pub backbone_invocations: u64,
    pub head_invocations: u64,
    pub sessions_active: usize,
    pub sessions_created: u64,
    pub sessions_evicted: u64,
    pub click_latency: LatencyHistogram,
}

struct Session {
    features: ImageFeatures<f32>,
    height: usize,
    width: usize,
    clicks: Vec<Click>,
    /// Current mask at the padded size.
    mask: Mask,
    reference: Option<Mask>,
    created_at: SystemTime,
}

impl Session {
    fn outcome(&self) -> Result<ClickOutcome> {
        let mask = self.mask.crop(0, 0, self.height, self.width)?;
        let iou = match &self.reference {
            Some(r) => Some(iou(&mask, r)?),
            None => None,
        };
        Ok(ClickOutcome {
            mask,
            clicks: self.clicks.len(),
            iou,
        })
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    last_used: u64,
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<String, Entry>,
    tick: u64,
    created: u64,
    evicted: u64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panicked request leaves the data consistent enough to keep serving
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Sessions over one shared, read-only model. Requests on different
/// sessions run concurrently; requests on one session are serialised by its
/// own lock.
pub struct SessionManager {
    model: Arc<Model<f32>>,
    config: ServiceConfig,
    registry: Mutex<Registry>,
    latency: Mutex<LatencyHistogram>,
}

impl SessionManager {
    pub fn new(model: Arc<Model<f32>>, config: ServiceConfig) -> Self {
        Self {
            model,
            config,
            registry: Mutex::new(Registry::default()),
            latency: Mutex::new(LatencyHistogram::new()),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Decodes and encodes the image (the only backbone pass of the session).
    pub fn create_session(&self, image_png: &[u8], reference_png: Option<&[u8]>) -> Result<SessionInfo> {
        let rgb = decode_rgb(image_png).map_err(|e| ServiceError::BadImage(e.to_string()))?;
        let (width, height) = (rgb.width() as usize, rgb.height() as usize);
        if height * width > self.config.max_pixels {
            return Err(ServiceError::TooLarge {
                height,
                width,
                limit: self.config.max_pixels,
            });
        }
        let reference = match reference_png {
            None => None,
            Some(bytes) => {
                let m = decode_mask(bytes).map_err(|e| ServiceError::BadImage(format!("reference mask: {e}")))?;
                if m.dims() != (height, width) {
                    return Err(ServiceError::BadImage(format!(
                        "reference mask is {}x{}, image is {height}x{width}",
                        m.height(),
                        m.width()
                    )));
                }
                Some(m)
            }
        };
        let p = self.model.config.patch_size();
        let (ph, pw) = self.model.config.padded_dims(height, width);
        let image = reflect_pad_image(&self.model.config.normalization.apply(&rgb), ph, pw);
        let features = self.model.encode(&image)?;
        let session = Session {
            features,
            height,
            width,
            clicks: Vec::new(),
            mask: Mask::zeros(ph, pw),
            reference,
            created_at: SystemTime::now(),
        };
        let id = format!("{:032x}", rand::random::<u128>());
        let mut reg = lock(&self.registry);
        while reg.sessions.len() >= self.config.max_sessions.max(1) {
            let oldest = reg
                .sessions
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
                .expect("registry is non-empty");
            reg.sessions.remove(&oldest);
            reg.evicted += 1;
        }
        reg.tick += 1;
        let last_used = reg.tick;
        reg.created += 1;
        reg.sessions.insert(
            id.clone(),
            Entry {
                session: Arc::new(Mutex::new(session)),
                last_used,
            },
        );
        Ok(SessionInfo {
            id,
            height,
            width,
            padded_height: ph,
            padded_width: pw,
            token_grid: [ph / p, pw / p],
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        let mut reg = lock(&self.registry);
        reg.tick += 1;
        let tick = reg.tick;
        let entry = reg
            .sessions
            .get_mut(id)
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))?;
        entry.last_used = tick;
        Ok(entry.session.clone())
    }

    fn predict(&self, s: &Session, clicks: &[Click], prev: &Mask) -> Result<Mask> {
        let start = Instant::now();
        let out = self.model.predict(&s.features, clicks, prev)?;
        lock(&self.latency).record(start.elapsed());
        Ok(out.mask)
    }

    /// Appends a click and runs the head once.
    pub fn add_click(&self, id: &str, click: Click) -> Result<ClickOutcome> {
        let handle = self.session(id)?;
        let mut s = lock(&handle);
        if click.row >= s.height || click.col >= s.width {
            return Err(ServiceError::ClickOutOfBounds {
                row: click.row,
                col: click.col,
                height: s.height,
                width: s.width,
            });
        }
        let mut clicks = s.clicks.clone();
        clicks.push(click);
        let mask = self.predict(&s, &clicks, &s.mask)?;
        s.clicks = clicks;
        s.mask = mask;
        s.outcome()
    }

    /// Drops the last click and rebuilds the mask by replaying the rest of
    /// the history from the empty mask.
    pub fn undo(&self, id: &str) -> Result<ClickOutcome> {
        let handle = self.session(id)?;
        let mut s = lock(&handle);
        if s.clicks.is_empty() {
            return Err(ServiceError::NothingToUndo);
        }
        let clicks = s.clicks[..s.clicks.len() - 1].to_vec();
        let mut mask = Mask::zeros(s.mask.height(), s.mask.width());
        for k in 1..=clicks.len() {
            mask = self.predict(&s, &clicks[..k], &mask)?;
        }
        s.clicks = clicks;
        s.mask = mask;
        s.outcome()
    }

    pub fn export(&self, id: &str) -> Result<Export> {
        let handle = self.session(id)?;
        let s = lock(&handle);
        Ok(Export {
            mask: s.mask.crop(0, 0, s.height, s.width)?,
            clicks: s.clicks.clone(),
            created_at: s.created_at,
        })
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        lock(&self.registry)
            .sessions
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn metrics(&self) -> ServiceMetrics {
        let reg = lock(&self.registry);
        ServiceMetrics {
            backbone_invocations: self.model.backbone_invocations(),
            head_invocations: self.model.head_invocations(),
            sessions_active: reg.sessions.len(),
            sessions_created: reg.created,
            sessions_evicted: reg.evicted,
            click_latency: lock(&self.latency).clone(),
        }
    }
}
