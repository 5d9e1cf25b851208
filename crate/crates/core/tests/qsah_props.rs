use std::collections::HashSet;

use proptest::prelude::*;
use qdex_core::qkms::KeyId;
use qdex_core::qsah::{
    sample_client_nonces, HandshakeSession, Server, SessionState, SharedKey, MESSAGE_LEN,
};
use qdex_core::rng::rng_from_seed;

fn shared(key: [u8; 32], id: u128) -> SharedKey {
    SharedKey {
        key_id: KeyId(id),
        key,
        expires_at_ms: u64::MAX,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn honest_handshakes_agree(key in any::<[u8; 32]>(), id in any::<u128>(), seed in any::<u64>()) {
        let k = shared(key, id);
        let mut rng = rng_from_seed(seed);
        let mut client = HandshakeSession::new(Some(k.clone()), 0.0);
        let mut server = Server::new();
        let hello = client.client_hello(&mut rng).unwrap();
        let out = server.server_response(&k, &hello.to_bytes(), 0, &mut rng).unwrap();
        let sk = *client.client_finish(&out.response.to_bytes(), 1.0).unwrap();
        prop_assert_eq!(client.state(), SessionState::Established);
        prop_assert_eq!(sk, out.session_key);
    }
}

#[test]
fn every_single_bit_tamper_is_rejected() {
    let k = shared([7; 32], 42);
    let mut rng = rng_from_seed(3);
    let mut probe = HandshakeSession::new(Some(k.clone()), 0.0);
    let hello = probe.client_hello(&mut rng).unwrap().to_bytes();
    let reply = Server::new()
        .server_response(&k, &hello, 0, &mut rng)
        .unwrap()
        .response
        .to_bytes();

    for bit in 0..MESSAGE_LEN * 8 {
        let mut m1 = hello;
        m1[bit / 8] ^= 1 << (bit % 8);
        assert!(Server::new().server_response(&k, &m1, 0, &mut rng).is_err());

        let mut m2 = reply;
        m2[bit / 8] ^= 1 << (bit % 8);
        let mut client = probe.clone();
        assert!(client.client_finish(&m2, 1.0).is_err(), "bit {bit}");
        assert_eq!(client.state(), SessionState::Failed);
    }
}

#[test]
fn client_nonces_do_not_repeat() {
    let nonces = sample_client_nonces(1_000_000, 5);
    let unique: HashSet<_> = nonces.iter().collect();
    assert_eq!(unique.len(), nonces.len());
}
