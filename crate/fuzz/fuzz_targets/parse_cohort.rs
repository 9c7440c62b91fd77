#![no_main]

use libfuzzer_sys::fuzz_target;

const HEADER: &str = r#"{"name":"fuzz","modalities":[{"name":"m0","size":4},{"name":"m1","size":2,"codes":["x","y"]}],"demographics_dim":2}"#;

// Patient lines are decoded against a fixed header; a parsed cohort must
// validate and survive a round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let header = ehrpd::data::parse_header(HEADER).expect("fixed header parses");
    if let Ok(cohort) = ehrpd::data::parse_cohort(&header, text) {
        cohort.validate().expect("parsed cohort validates");
        let again = ehrpd::data::parse_cohort(&header, &ehrpd::data::cohort_to_jsonl(&cohort))
            .expect("serialised cohort parses");
        assert_eq!(again.patients.len(), cohort.patients.len());
    }
});
