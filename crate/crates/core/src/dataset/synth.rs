//! Seeded synthetic campaign generator.
//!
//! Clicks come from a logistic model over hidden per-token weights; market
//! prices are log-normal and can be correlated with the latent click
//! probability through `price_click_correlation`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_and_partition, CampaignDataset, DatasetError, FeatureMap, ImpressionEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: usize,
}

impl FieldSpec {
    pub fn new(name: &str, vocab: usize) -> Self {
        FieldSpec { name: name.to_string(), vocab }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub campaign_id: String,
    pub days: usize,
    pub events_per_day: usize,
    pub test_day_count: usize,
    pub steps_per_day: usize,
    pub fields: Vec<FieldSpec>,
    /// Median clearing price in minor units.
    pub price_median: f64,
    /// Log-normal shape of prices.
    pub price_sigma: f64,
    /// In [-1, 1]; 0 draws prices independent of the latent click probability.
    pub price_click_correlation: f64,
    /// Logistic intercept; -4 gives a base click rate near 1.8%.
    pub click_bias: f64,
    /// Scale of the hidden per-token weights.
    pub coef_sigma: f64,
    /// Optional per-hour price multipliers (24 entries) to shape the day.
    pub hourly_price_boost: Option<Vec<f64>>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            campaign_id: "synth".to_string(),
            days: 6,
            events_per_day: 600,
            test_day_count: 3,
            steps_per_day: 24,
            fields: vec![
                FieldSpec::new("weekday", 7),
                FieldSpec::new("region", 24),
                FieldSpec::new("city", 60),
                FieldSpec::new("adexchange", 4),
                FieldSpec::new("domain", 40),
                FieldSpec::new("slotid", 20),
                FieldSpec::new("slotformat", 4),
                FieldSpec::new("useragent", 12),
            ],
            price_median: 60.0,
            price_sigma: 0.6,
            price_click_correlation: 0.3,
            click_bias: -4.0,
            coef_sigma: 0.8,
            hourly_price_boost: None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::BadSynthParams(msg));
        if self.campaign_id.is_empty() {
            return bad("empty campaign_id".into());
        }
        if self.test_day_count == 0 || self.days < self.test_day_count + 1 {
            return bad(format!(
                "days={} must exceed test_day_count={}",
                self.days, self.test_day_count
            ));
        }
        if self.events_per_day == 0 {
            return bad("events_per_day must be positive".into());
        }
        if self.fields.is_empty() || self.fields.iter().any(|f| f.vocab == 0 || f.name.is_empty()) {
            return bad("fields must be nonempty with positive vocab sizes".into());
        }
        if !(self.price_median > 0.0 && self.price_median.is_finite()) {
            return bad(format!("price_median={} must be positive", self.price_median));
        }
        if !(self.price_sigma >= 0.0 && self.price_sigma.is_finite()) {
            return bad(format!("price_sigma={} must be nonnegative", self.price_sigma));
        }
        if !(-1.0..=1.0).contains(&self.price_click_correlation) {
            return bad(format!(
                "price_click_correlation={} outside [-1, 1]",
                self.price_click_correlation
            ));
        }
        if !self.click_bias.is_finite() || !(self.coef_sigma >= 0.0 && self.coef_sigma.is_finite()) {
            return bad("click_bias must be finite, coef_sigma nonnegative".into());
        }
        if let Some(boost) = &self.hourly_price_boost {
            if boost.len() != 24 || boost.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
                return bad("hourly_price_boost needs 24 positive entries".into());
            }
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const PRICE_CAP: f64 = 1e12;

/// Generates the raw event stream plus each event's latent click probability
/// (aligned by index). Same seed and params, same bytes.
pub fn synth_events(
    seed: u64,
    params: &SynthParams,
) -> Result<(Vec<ImpressionEvent>, Vec<f64>), DatasetError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let weights: Vec<Vec<f64>> = params
        .fields
        .iter()
        .map(|f| {
            (0..f.vocab)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * params.coef_sigma)
                .collect()
        })
        .collect();
    let latent_std = params.coef_sigma * (params.fields.len() as f64).sqrt();
    let rho = params.price_click_correlation;
    let noise_mix = (1.0 - rho * rho).sqrt();

    let mut events = Vec::with_capacity(params.days * params.events_per_day);
    let mut latents = Vec::with_capacity(events.capacity());
    for day in 0..params.days {
        let mut day_rows: Vec<(ImpressionEvent, f64)> = Vec::with_capacity(params.events_per_day);
        for _ in 0..params.events_per_day {
            let hour: u8 = rng.random_range(0..24);
            let mut features = FeatureMap::with_capacity(params.fields.len());
            let mut z = params.click_bias;
            for (field, w) in params.fields.iter().zip(&weights) {
                let token = rng.random_range(0..field.vocab);
                features.insert(field.name.clone(), format!("v{token}"));
                z += w[token];
            }
            let p_click = sigmoid(z);
            let click = (rng.random::<f64>() < p_click) as u8;

            let z_std = if latent_std > 0.0 { (z - params.click_bias) / latent_std } else { 0.0 };
            let eps: f64 = rng.sample(StandardNormal);
            let mix = rho * z_std + noise_mix * eps;
            let boost = params
                .hourly_price_boost
                .as_ref()
                .map_or(1.0, |b| b[hour as usize]);
            let price_f = (params.price_median.ln() + params.price_sigma * mix).exp() * boost;
            let market_price = price_f.clamp(1.0, PRICE_CAP).floor() as u64;

            day_rows.push((
                ImpressionEvent {
                    campaign_id: params.campaign_id.clone(),
                    day_index: day,
                    hour,
                    market_price,
                    click,
                    features,
                },
                p_click,
            ));
        }
        day_rows.sort_by_key(|(ev, _)| ev.hour);
        for (ev, p) in day_rows {
            events.push(ev);
            latents.push(p);
        }
    }
    Ok((events, latents))
}

/// Builds a full campaign dataset from the generator and the params' split.
pub fn synthesize_campaign(seed: u64, params: &SynthParams) -> Result<CampaignDataset, DatasetError> {
    let (events, _) = synth_events(seed, params)?;
    split_and_partition(events, params.test_day_count, params.steps_per_day)
}
