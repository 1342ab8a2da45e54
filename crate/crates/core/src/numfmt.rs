//! C-compatible number formatting for the text artifacts (`%.12e`, `%.17g`).

fn split_exponent(s: &str) -> (&str, i32) {
    let (mantissa, exp) = s.split_once('e').expect("scientific formatting always has an exponent");
    (mantissa, exp.parse().expect("valid exponent"))
}

fn non_finite(x: f64) -> Option<String> {
    if x.is_nan() {
        Some("nan".into())
    } else if x.is_infinite() {
        Some(if x > 0.0 { "inf".into() } else { "-inf".into() })
    } else {
        None
    }
}

fn with_c_exponent(mantissa: &str, exp: i32) -> String {
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.unsigned_abs())
}

/// `printf("%.12e", x)`
pub fn sci12(x: f64) -> String {
    if let Some(s) = non_finite(x) {
        return s;
    }
    let s = format!("{x:.12e}");
    let (mantissa, exp) = split_exponent(&s);
    with_c_exponent(mantissa, exp)
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `printf("%.17g", x)`
pub fn general17(x: f64) -> String {
    if let Some(s) = non_finite(x) {
        return s;
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let s = format!("{x:.16e}");
    let (mantissa, exp) = split_exponent(&s);
    if !(-4..17).contains(&exp) {
        with_c_exponent(strip_zeros(mantissa), exp)
    } else {
        let fixed = format!("{x:.*}", (16 - exp) as usize);
        strip_zeros(&fixed).to_string()
    }
}
