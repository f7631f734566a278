//! Instacart order files to raw subjects: one subject per user, one basket
//! per order, products as `product_{id}` tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::data::io::hash_unit;
use crate::data::seqset::{RawSet, RawSubject};
use crate::error::{NestError, Result};

struct Order {
    user: String,
    number: u64,
    gap: f64,
    products: Vec<String>,
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| NestError::Format(format!("{} lacks column {name:?}", path.display())))
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, path: &Path) -> Result<&'a str> {
    rec.get(idx)
        .map(str::trim)
        .ok_or_else(|| NestError::Format(format!("{}: short record {:?}", path.display(), rec)))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| NestError::Format(format!("{}: cannot parse {what} {s:?}", path.display())))
}

/// Reads the orders and order-products tables and keeps users whose
/// hashed id falls below `sample_fraction`.
pub fn ingest_instacart(orders_csv: &Path, order_products_csv: &Path, sample_fraction: f64) -> Result<Vec<RawSubject>> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(NestError::Config(format!("sample_fraction {sample_fraction} outside (0, 1]")));
    }
    let mut orders: HashMap<String, Order> = HashMap::new();
    let mut order_seq: Vec<String> = Vec::new();
    let mut rdr = csv::Reader::from_path(orders_csv)?;
    let headers = rdr.headers()?.clone();
    let (c_id, c_user, c_num, c_gap) = (
        column(&headers, "order_id", orders_csv)?,
        column(&headers, "user_id", orders_csv)?,
        column(&headers, "order_number", orders_csv)?,
        column(&headers, "days_since_prior_order", orders_csv)?,
    );
    for rec in rdr.records() {
        let rec = rec?;
        let user = field(&rec, c_user, orders_csv)?.to_string();
        if hash_unit("instacart-sample", &user) >= sample_fraction {
            continue;
        }
        let id = field(&rec, c_id, orders_csv)?.to_string();
        let gap_text = field(&rec, c_gap, orders_csv)?;
        let gap = if gap_text.is_empty() || gap_text.eq_ignore_ascii_case("na") || gap_text.eq_ignore_ascii_case("nan") {
            0.0
        } else {
            parse::<f64>(gap_text, "days_since_prior_order", orders_csv)?
        };
        let number = parse::<u64>(field(&rec, c_num, orders_csv)?, "order_number", orders_csv)?;
        order_seq.push(id.clone());
        orders.insert(id, Order { user, number, gap, products: Vec::new() });
    }

    let mut rdr = csv::Reader::from_path(order_products_csv)?;
    let headers = rdr.headers()?.clone();
    let (p_order, p_product) = (
        column(&headers, "order_id", order_products_csv)?,
        column(&headers, "product_id", order_products_csv)?,
    );
    // users are sampled, so an order id is only unknown if its user was never listed
    let mut sampled_out: Option<HashMap<String, ()>> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let id = field(&rec, p_order, order_products_csv)?;
        let product = field(&rec, p_product, order_products_csv)?;
        match orders.get_mut(id) {
            Some(o) => o.products.push(format!("product_{product}")),
            None => {
                if sample_fraction >= 1.0 {
                    return Err(NestError::Consistency(format!("order {id} is not listed in the orders table")));
                }
                let known = sampled_out.get_or_insert_with(|| all_order_ids(orders_csv).unwrap_or_default());
                if !known.contains_key(id) {
                    return Err(NestError::Consistency(format!("order {id} is not listed in the orders table")));
                }
            }
        }
    }

    let mut by_user: HashMap<String, Vec<&Order>> = HashMap::new();
    let mut user_seq: Vec<String> = Vec::new();
    for id in &order_seq {
        let o = &orders[id];
        by_user
            .entry(o.user.clone())
            .or_insert_with(|| {
                user_seq.push(o.user.clone());
                Vec::new()
            })
            .push(o);
    }
    let mut subjects = Vec::new();
    for user in user_seq {
        let mut list = by_user.remove(&user).unwrap_or_default();
        list.sort_by_key(|o| o.number);
        let mut t = 0.0;
        let mut sets = Vec::new();
        for (i, o) in list.iter().enumerate() {
            if i > 0 {
                t += o.gap;
            }
            if !o.products.is_empty() {
                sets.push(RawSet { t, tokens: o.products.clone() });
            }
        }
        if !sets.is_empty() {
            subjects.push(RawSubject { subject_id: format!("user_{user}"), sets });
        }
    }
    Ok(subjects)
}

fn all_order_ids(orders_csv: &Path) -> Result<HashMap<String, ()>> {
    let mut rdr = csv::Reader::from_path(orders_csv)?;
    let headers = rdr.headers()?.clone();
    let c_id = column(&headers, "order_id", orders_csv)?;
    let mut ids = HashMap::new();
    for rec in rdr.records() {
        ids.insert(field(&rec?, c_id, orders_csv)?.to_string(), ());
    }
    Ok(ids)
}
