//! One-shot ultimatum game: strategy spaces, payoffs and the subgame perfect
//! equilibrium.
//!
//! Offers are stored as integer coin counts handed to the responder. The
//! fraction of the good offered is derived on demand with [`Offer::fraction`].

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GameError {
    #[error("total_good must be positive")]
    EmptyGood,
    #[error("redemption_rate must be positive")]
    ZeroRate,
    #[error("offer of {offer} coins is outside [0, {total_good}]")]
    OfferOutOfRange { offer: i64, total_good: u32 },
}

/// The divisible good and the currency it is redeemed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GameConfig {
    /// Number of coins to split.
    pub total_good: u32,
    /// Currency units paid out per coin at the end of the game.
    pub redemption_rate: u64,
}

impl GameConfig {
    pub fn new(total_good: u32, redemption_rate: u64) -> Result<Self, GameError> {
        let config = Self {
            total_good,
            redemption_rate,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GameError> {
        if self.total_good == 0 {
            return Err(GameError::EmptyGood);
        }
        if self.redemption_rate == 0 {
            return Err(GameError::ZeroRate);
        }
        Ok(())
    }
}

impl Default for GameConfig {
    /// 100 coins, each redeemed for 100 dollars.
    fn default() -> Self {
        Self {
            total_good: 100,
            redemption_rate: 100,
        }
    }
}

/// Coins the proposer hands to the responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Offer(u32);

impl Offer {
    pub fn new(config: &GameConfig, coins: i64) -> Result<Self, GameError> {
        if coins < 0 || coins > i64::from(config.total_good) {
            return Err(GameError::OfferOutOfRange {
                offer: coins,
                total_good: config.total_good,
            });
        }
        Ok(Self(coins as u32))
    }

    pub fn coins(self) -> u32 {
        self.0
    }

    /// Share of the good offered, in `[0, 1]`.
    pub fn fraction(self, config: &GameConfig) -> f64 {
        f64::from(self.0) / f64::from(config.total_good)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponderChoice {
    Accept,
    Reject,
}

impl ResponderChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponderChoice::Accept => "accept",
            ResponderChoice::Reject => "reject",
        }
    }

    pub fn is_accept(self) -> bool {
        self == ResponderChoice::Accept
    }
}

impl fmt::Display for ResponderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResponderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accept" => Ok(ResponderChoice::Accept),
            "reject" => Ok(ResponderChoice::Reject),
            other => Err(format!("unknown responder choice {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PayoffPair {
    pub proposer_payoff: u32,
    pub responder_payoff: u32,
}

/// Coins received by each player once the responder has chosen.
pub fn payoff(
    config: &GameConfig,
    offer: Offer,
    choice: ResponderChoice,
) -> Result<PayoffPair, GameError> {
    if offer.coins() > config.total_good {
        return Err(GameError::OfferOutOfRange {
            offer: i64::from(offer.coins()),
            total_good: config.total_good,
        });
    }
    Ok(match choice {
        ResponderChoice::Accept => PayoffPair {
            proposer_payoff: config.total_good - offer.coins(),
            responder_payoff: offer.coins(),
        },
        ResponderChoice::Reject => PayoffPair {
            proposer_payoff: 0,
            responder_payoff: 0,
        },
    })
}

/// Subgame perfect equilibrium: offer nothing, and the responder accepts.
pub fn equilibrium(_config: &GameConfig) -> (Offer, ResponderChoice) {
    (Offer(0), ResponderChoice::Accept)
}

/// Currency value of a number of coins.
pub fn redeemed_value(config: &GameConfig, coins: u32) -> u64 {
    u64::from(coins) * config.redemption_rate
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r100() -> GameConfig {
        GameConfig::default()
    }

    #[test]
    fn payoff_examples() {
        let c = r100();
        let p = payoff(&c, Offer::new(&c, 30).unwrap(), ResponderChoice::Accept).unwrap();
        assert_eq!((p.proposer_payoff, p.responder_payoff), (70, 30));
        let p = payoff(&c, Offer::new(&c, 0).unwrap(), ResponderChoice::Accept).unwrap();
        assert_eq!((p.proposer_payoff, p.responder_payoff), (100, 0));
        let p = payoff(&c, Offer::new(&c, 55).unwrap(), ResponderChoice::Reject).unwrap();
        assert_eq!((p.proposer_payoff, p.responder_payoff), (0, 0));
    }

    #[test]
    fn offer_out_of_range_is_rejected() {
        let c = r100();
        assert!(matches!(
            Offer::new(&c, 101),
            Err(GameError::OfferOutOfRange { offer: 101, .. })
        ));
        assert!(Offer::new(&c, -1).is_err());
        // An offer built against a larger good is still checked against this one.
        let big = GameConfig::new(200, 1).unwrap();
        let offer = Offer::new(&big, 150).unwrap();
        assert!(payoff(&c, offer, ResponderChoice::Accept).is_err());
    }

    #[test]
    fn equilibrium_is_zero_accept() {
        for total in [100, 10, 1] {
            let c = GameConfig::new(total, 100).unwrap();
            let (offer, choice) = equilibrium(&c);
            assert_eq!(offer.coins(), 0);
            assert_eq!(choice, ResponderChoice::Accept);
            let p = payoff(&c, offer, choice).unwrap();
            assert_eq!((p.proposer_payoff, p.responder_payoff), (total, 0));
        }
    }

    #[test]
    fn redemption() {
        let c = r100();
        assert_eq!(redeemed_value(&c, 30), 3000);
        assert_eq!(redeemed_value(&c, 0), 0);
        assert_eq!(redeemed_value(&c, 100), 10_000);
    }

    #[test]
    fn invalid_configs() {
        assert_eq!(GameConfig::new(0, 100), Err(GameError::EmptyGood));
        assert_eq!(GameConfig::new(100, 0), Err(GameError::ZeroRate));
    }

    #[test]
    fn exhaustive_sum_and_dominance() {
        let c = r100();
        for coins in 0..=100 {
            let offer = Offer::new(&c, coins).unwrap();
            let acc = payoff(&c, offer, ResponderChoice::Accept).unwrap();
            let rej = payoff(&c, offer, ResponderChoice::Reject).unwrap();
            assert_eq!(acc.proposer_payoff + acc.responder_payoff, 100);
            assert_eq!(rej.proposer_payoff + rej.responder_payoff, 0);
            assert!(acc.responder_payoff >= rej.responder_payoff);
            assert_eq!(acc.responder_payoff == rej.responder_payoff, coins == 0);
            assert_eq!(payoff(&c, offer, ResponderChoice::Accept).unwrap(), acc);
        }
    }

    #[test]
    fn fraction_and_choice_parsing() {
        let c = r100();
        assert_eq!(Offer::new(&c, 25).unwrap().fraction(&c), 0.25);
        assert_eq!("ACCEPT".parse::<ResponderChoice>(), Ok(ResponderChoice::Accept));
        assert!("maybe".parse::<ResponderChoice>().is_err());
    }
}
