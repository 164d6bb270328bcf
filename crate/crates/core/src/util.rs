//! Small shared helpers.

/// Applies `f` to every item with at most `limit` worker threads in flight.
/// Results come back in input order regardless of completion order.
pub fn par_map_bounded<T, R, F>(items: Vec<T>, limit: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    let limit = limit.max(1);
    if limit == 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let work: Vec<std::sync::Mutex<Option<T>>> =
        items.into_iter().map(|t| std::sync::Mutex::new(Some(t))).collect();
    let results: Vec<std::sync::Mutex<Option<R>>> = (0..n).map(|_| std::sync::Mutex::new(None)).collect();
    let cursor = std::sync::atomic::AtomicUsize::new(0);
    let f = &f;
    let work = &work;
    let results = &results;
    let cursor = &cursor;
    std::thread::scope(|scope| {
        for _ in 0..limit.min(n) {
            scope.spawn(move || loop {
                let idx = cursor.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let item = work[idx].lock().expect("work slot").take().expect("item present");
                let out = f(item);
                *results[idx].lock().expect("result slot") = Some(out);
            });
        }
    });
    results
        .iter()
        .map(|slot| slot.lock().expect("result slot").take().expect("result present"))
        .collect()
}

/// Escapes a CSV field: quotes it when it contains a comma, quote, or
/// newline.
pub fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') || value.contains('\n') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = par_map_bounded(items, 4, |x| x * 2);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
